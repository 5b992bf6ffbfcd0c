from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from meanfield.dynamics import DriftSpec, ModelParams, NoiseSpec
from meanfield.kernels import KernelSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def make_params(A=0.5, delta=0.05, alpha=0.3, a1=1.0, a2=0.0, a3=0.0, b=1.0, lam=1.0, lam_dep=1.0,
                dim=1, variant="linear", kappa=0.0, **noise) -> ModelParams:
    return ModelParams(A * np.eye(dim), delta, alpha, DriftSpec(a1, a2, a3, variant, kappa), NoiseSpec(b=b, **noise),
                       KernelSpec("gaussian", lam, dim), KernelSpec("gaussian", lam_dep, dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
