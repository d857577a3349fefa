"""clip-service: thin embedding microservice for the swarm engine."""

__version__ = "0.1.0"
