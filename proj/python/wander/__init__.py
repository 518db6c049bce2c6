"""Low-rank multimodal sequence fusion."""

import json

from ._core import (
    InvalidArgument,
    InvalidConfiguration,
    ResourceLimit,
    count_params,
    random_factors,
    run_cli,
    sequence_fusion,
    sequence_fusion_oracle,
)

__all__ = [
    "InvalidArgument",
    "InvalidConfiguration",
    "ResourceLimit",
    "count_params",
    "random_factors",
    "run",
    "run_cli",
    "sequence_fusion",
    "sequence_fusion_oracle",
]


def run(*args):
    """Run a CLI command with JSON output and return (exit_code, report)."""
    code, out, err = run_cli([str(a) for a in args] + ["--format", "json"])
    if not out:
        raise RuntimeError(err.strip())
    return code, json.loads(out)
