class ConfigurationError(Exception):
    """Bad settings, flags, folders, templates, or simulator profiles."""
