"""Forward drift-diffusion-Poisson-Boltzmann model of a nanowire field-effect
sensor and DRAM-based Bayesian inversion of its current-voltage curves."""

__version__ = "0.1.0"
