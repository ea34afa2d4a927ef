"""Zero-shot prompt templates and class-name lists for public pathology datasets."""

# Each template has exactly one "{}" slot, filled with a class name.
DEFAULT_PROMPT_TEMPLATES = [
    "An H&E image of {}",
    "This is an image of {} presented in the image",
    "An H&E patch of {}",
]

DATASET_CLASS_NAMES = {
    "pcam": ["lymph node", "lymph node metastasis"],
    "crc100k": [
        "Adipose",
        "Debris",
        "Lymphocytes",
        "Mucus",
        "Smooth muscle",
        "Normal colon mucosa",
        "Cancer-associated stroma",
        "Colorectal adenocarcinoma epithelium",
    ],
    "lc25000_lung": ["Lung adenocarcinoma", "benign lung tissue", "lung squamous cell carcinomas"],
    "lc25000_colon": ["Colon adenocarcinoma", "normal colon tissue"],
    "bach": ["Benign tissue", "In-situ carcinoma", "Invasive carcinoma", "Normal tissue"],
    "osteo": ["Non-tumor", "Necrotic tumor", "Viable tumor"],
    "wsss4luad": ["tumor", "normal"],
}


def get_class_names(dataset: str) -> list[str]:
    """
    Get the zero-shot class names for a dataset.

    Args:
        dataset: Dataset key (e.g., 'bach', 'pcam')

    Returns:
        List of class names in label-index order

    Raises:
        ValueError: If the dataset is not known
    """
    if dataset not in DATASET_CLASS_NAMES:
        raise ValueError(
            f"Unknown dataset: {dataset}. "
            f"Available datasets: {list(DATASET_CLASS_NAMES.keys())}"
        )
    return list(DATASET_CLASS_NAMES[dataset])
