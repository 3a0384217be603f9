"""PixelCAM: joint image and FG/BG pixel classification for weakly supervised localization."""

__version__ = "0.1.0"
