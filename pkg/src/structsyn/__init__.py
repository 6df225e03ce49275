"""Structure-aware MR-to-CT translation trained on procedural pelvic phantoms."""

__version__ = "0.1.0"
