import numpy as np
import pytest

from streamreid.data import (AffineShift, Dataset, Domain, Sample, Split,
                             SynthConfig, generate_synthetic)
from streamreid.mlp import MLP


def make_sample(vec, identity=0, camera=0, domain=Domain.SOURCE):
    return Sample(np.asarray(vec, dtype=np.float64), identity, camera, domain)


def make_dataset(rows, identities, cameras=None, domain=Domain.SOURCE,
                 split=Split.TRAIN):
    rows = np.asarray(rows, dtype=np.float64)
    cameras = cameras if cameras is not None else [0] * rows.shape[0]
    samples = [make_sample(rows[i], int(identities[i]), int(cameras[i]), domain)
               for i in range(rows.shape[0])]
    return Dataset(samples, split)


def identity_extractor(dim):
    """MLP whose features equal its input descriptors."""
    m = MLP([dim, dim], seed=0)
    m.set_params({"layer0.W": np.eye(dim), "layer0.b": np.zeros(dim)})
    return m


def fd_gradient(fun, x, step=1e-5):
    """Central finite differences of scalar fun at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = g.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = fun(x)
        flat_x[i] = orig - step
        fm = fun(x)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * step)
    return g


def fd_param_gradients(mlp, loss_fn, step=1e-5):
    """Central finite differences of loss_fn() w.r.t. every MLP parameter."""
    grads = {}
    for name, arr in mlp.params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            mlp.mark_updated()
            fp = loss_fn()
            flat[i] = orig - step
            mlp.mark_updated()
            fm = loss_fn()
            flat[i] = orig
            mlp.mark_updated()
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(f)))
    return float(np.max(np.abs(a - f) / denom))


@pytest.fixture
def small_synth():
    cfg = SynthConfig(
        n_identities_source=10, n_identities_target=8, samples_per_identity=6,
        d_in=6, intra_class_std=0.05, domain_shift=AffineShift.identity(6),
        camera_count=2, camera_jitter_std=0.02, seed=11,
    )
    return generate_synthetic(cfg)
