"""Attribute-aware text-to-motion generation with decoupled semantic tokens."""

from .schema import DEFAULT_SCHEMA, AttributeLabel, AttributeSchema

__all__ = ["AttributeLabel", "AttributeSchema", "DEFAULT_SCHEMA"]
__version__ = "0.1.0"
