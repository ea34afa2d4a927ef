# Nodes package
