"""Meta-learned BRDF fitting and meta-learned acquisition sample patterns."""

__version__ = "0.1.0"
