"""blindnav: desk-scale PointGoal navigation with latent-map representation learning."""

__version__ = "0.1.0"
