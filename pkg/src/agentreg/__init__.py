"""Multi-agent MDP 2D/3D rigid registration on synthetic cone-beam data."""

__version__ = "0.1.0"
