"""Text-Hanabi laboratory: engine, text codec, teacher/student training and evaluation."""

__version__ = "0.1.0"
