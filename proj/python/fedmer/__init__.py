"""Federated micro-expression recognition on synthetic AU-conditioned data.

Thin Python surface over the C++ core: metrics (UF1/UAR), AU priors,
parameter serialization, federated aggregation, the synthetic dataset
generator, and the experiment runner.
"""

try:
    # installed wheel: the extension lives inside the package
    from ._fedmer import (
        aggregate_fedavg,
        aggregate_pfedprox,
        beta_at,
        compute_cooccurrence,
        default_adjacency,
        deserialize_params,
        generate_dataset,
        run_experiment,
        serialize_params,
        strategies,
        uar,
        uf1,
    )
except ImportError:  # in-tree build: extension on PYTHONPATH next to the build
    from _fedmer import (
        aggregate_fedavg,
        aggregate_pfedprox,
        beta_at,
        compute_cooccurrence,
        default_adjacency,
        deserialize_params,
        generate_dataset,
        run_experiment,
        serialize_params,
        strategies,
        uar,
        uf1,
    )

__all__ = [
    "aggregate_fedavg",
    "aggregate_pfedprox",
    "beta_at",
    "compute_cooccurrence",
    "default_adjacency",
    "deserialize_params",
    "generate_dataset",
    "run_experiment",
    "serialize_params",
    "strategies",
    "uar",
    "uf1",
]
