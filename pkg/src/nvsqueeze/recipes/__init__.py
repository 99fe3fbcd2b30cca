"""Built-in run configurations (YAML), listed by ``nvsqueeze recipes``."""
