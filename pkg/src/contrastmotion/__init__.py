"""Self-supervised pillar-based scene motion estimation by contrastive pillar association."""

__version__ = "0.1.0"
