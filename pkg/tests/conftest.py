import numpy as np
import pytest

from codecalign import world as W


@pytest.fixture(scope="session")
def default_world():
    return W.world_init(W.WorldConfig())


@pytest.fixture(scope="session")
def micro_world():
    # tiny alphabet so exhaustive enumeration is feasible
    cfg = W.WorldConfig(v_text=3, l_text=1, k_ar=4, k_nar=4, q_layers=2,
                        expansion=2, speakers=2, d_emb=4, world_seed=5)
    return W.world_init(cfg)


@pytest.fixture
def fd_grad():
    """Central finite differences of a scalar loss at selected coordinates."""

    def _fd(loss_fn, params, coords, h=1e-5):
        out = np.empty(len(coords))
        for j, i in enumerate(coords):
            p_hi = params.copy()
            p_hi[i] += h
            p_lo = params.copy()
            p_lo[i] -= h
            out[j] = (loss_fn(p_hi) - loss_fn(p_lo)) / (2 * h)
        return out

    return _fd


@pytest.fixture
def grad_rel_err():
    """Worst relative disagreement between analytic and numeric gradients."""

    def _err(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
        return float((np.abs(analytic - numeric) / denom).max())

    return _err
