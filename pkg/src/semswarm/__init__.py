"""semswarm: language-steered evolution of swarm artificial life."""

__version__ = "0.1.0"
