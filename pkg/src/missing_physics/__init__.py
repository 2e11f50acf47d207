"""Sequential experimental design for discovering missing physics."""

__version__ = "0.1.0"
