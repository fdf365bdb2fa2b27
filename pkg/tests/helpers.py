import numpy as np

from mrti.diffusion import Batch, ModelConfig, ModelParams, NoiseSchedule, loss_gradient

SMALL_VOCAB = ("<null>", "a", "photo", "of", "cat")


def small_config(**kw):
    base = dict(image_size=2, embed_dim=3, cond_dim=4, time_dim=4, hidden=8, enc_hidden=5, max_len=4,
                vocab=SMALL_VOCAB)
    base.update(kw)
    return ModelConfig(**base)


def random_small_model(seed, **kw):
    cfg = small_config(**kw)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, seed=seed)
    # denser weights than the default init so every nonlinearity is exercised
    flat = params.flat.copy() + 0.3 * rng.standard_normal(params.flat.shape)
    return ModelParams(cfg, flat)


def random_batch(cfg, seed, B=3, T=3):
    rng = np.random.default_rng(seed + 1000)
    D = cfg.data_dim
    ids = rng.integers(1, len(cfg.vocab), size=(B, 3))
    ids[:, 1] = -1
    crow = np.where(ids < 0, rng.integers(0, T, size=(B, 1)), -1)
    return Batch(rng.uniform(-1, 1, (B, D)), rng.random(B), rng.standard_normal((B, D)), ids, crow), \
        rng.standard_normal((T, cfg.embed_dim))


def finite_difference(params, selector, batch, sched, concept, h=1e-4):
    """Central differences of the mean batch loss, written independently of backprop."""
    out = {}
    for name in selector:
        if name == "concept":
            base = concept
        else:
            base = params[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            old = base[idx]
            base[idx] = old + h
            fp, _ = loss_gradient(params, [], batch, sched, concept=concept)
            base[idx] = old - h
            fm, _ = loss_gradient(params, [], batch, sched, concept=concept)
            base[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out
