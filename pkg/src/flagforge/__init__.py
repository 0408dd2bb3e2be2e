"""flagforge: a self-contained hosting plane for replicated TCP services.

The package is organized around six cooperating parts:

- ``model``      declarative topology document, diff, and idempotent converge
- ``registry``   runtime record of services, networks, and replica endpoints
- ``supervisor`` keeps services at their desired replica count, probes health,
  and performs one-at-a-time rolling updates
- ``balancer``   per-backend L4 reverse proxy with source-IP session affinity
- ``ingress``    frontend entry point mapping external ports to backend
  balancer listeners
- ``pipeline``   artifact store scanning, bundle packaging, and deployment

``runtime`` wires these together over a state directory and ``cli`` exposes
the operator commands.
"""

__version__ = "0.1.0"
