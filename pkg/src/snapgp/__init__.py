"""Population dynamics from temporal snapshots with a reduced-rank
heteroscedastic latent GP and an entropic optimal-transport objective."""

__version__ = "0.1.0"
