# Lazy import to avoid loading torch/langgraph on `import wsikit`
def create_graph():
    """Create and return the tile -> encode -> compress -> zeroshot pipeline graph

    Returns:
        Compiled StateGraph instance
    """
    from .graph import create_graph as _create_graph
    return _create_graph()

__all__ = ["create_graph"]
