"""Learn game-event logs from gameplay video frames."""

__version__ = "0.1.0"
