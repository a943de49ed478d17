"""Python access to the C++ core.

Stage commands mirror the ``aat`` CLI and write the same artifact layout
under ``out``. Reports come back as plain dicts.
"""

from ._core import (
    CapabilityError,
    Config,
    ConfigError,
    DataError,
    DependencyError,
    DomainError,
    Error,
    GridPixels,
    ShapeError,
    ablate,
    attack,
    collect,
    expectile,
    expectile_loss,
    patchify,
    returns_to_go,
    run_suite,
    train_generator,
    train_predictor,
    train_values,
    unpatchify,
    weighted_advantage,
)


def run(config, out):
    """Every stage in order; returns the attack report."""
    collect(config, out)
    train_values(config, out)
    if config["generator.condition"] != "returns_to_go":
        train_predictor(config, out)
    train_generator(config, out)
    return attack(config, out)


__all__ = [name for name in dir() if not name.startswith("_")]
