"""Offline CLS-embedding extraction for the moerec embedding-file interface."""

from .extract import (
    ExtractorConfig,
    extract_image,
    extract_text,
    read_entities,
    validate_output,
)

__version__ = "0.1.0"
