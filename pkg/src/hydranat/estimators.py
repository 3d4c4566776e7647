"""scikit-learn style wrappers around the functional layers.

``fit`` only draws parameters (like a random projection): it reads the input
shape, validates the configuration against it and initializes weights from
``random_state``. ``transform`` runs the forward pass.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import generator as gen
from . import hydra as hy
from .exceptions import DimensionError
from .tensor import make_rng
from .validation import check_dtype, check_tensor

__all__ = ["HydraNeighborhoodAttention", "StyleNATGenerator"]


def _seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, np.random.Generator):
        return random_state
    return int(random_state)


class HydraNeighborhoodAttention(TransformerMixin, BaseEstimator):
    """Hydra-NA layer over ``[B, H, W, dim]`` feature maps.

    Parameters
    ----------
    kernel_sizes : sequence of int
        One odd kernel per partition.
    dilations : sequence of int, optional
        One dilation per partition (all 1 by default).
    num_heads : int
        Total heads, distributed to partitions by :func:`partition_heads`.
    qkv_bias : bool
    qk_scale : float, optional
        Overrides ``head_dim ** -0.5``.
    attn_drop, proj_drop : float
        Inverted dropout rates, applied only when ``deterministic=False``.
    deterministic : bool
    random_state : int or numpy Generator
    dtype : {"f32", "f64"}

    Attributes
    ----------
    plan_ : PartitionPlan
    params_ : HydraParams
    n_features_in_ : int
    """

    def __init__(self, kernel_sizes=(7,), dilations=None, num_heads=4, qkv_bias=True, qk_scale=None,
                 attn_drop=0.0, proj_drop=0.0, deterministic=True, random_state=0, dtype="f32"):
        self.kernel_sizes = kernel_sizes
        self.dilations = dilations
        self.num_heads = num_heads
        self.qkv_bias = qkv_bias
        self.qk_scale = qk_scale
        self.attn_drop = attn_drop
        self.proj_drop = proj_drop
        self.deterministic = deterministic
        self.random_state = random_state
        self.dtype = dtype

    def fit(self, X, y=None):
        X = check_tensor(X, ndim=4, name="X", dtype=self.dtype)
        _, h, w, dim = X.shape
        plan = hy.PartitionPlan.from_lists(self.num_heads, self.kernel_sizes, self.dilations)
        plan.check_fits(h, w)
        rng = make_rng(_seed(self.random_state))
        self.plan_ = plan
        self.params_ = hy.init_hydra_params(dim, plan, rng, self.qkv_bias, self.qk_scale, check_dtype(self.dtype))
        self.n_features_in_ = dim
        self._dropout_rng = rng
        return self

    def transform(self, X, capture=None):
        check_is_fitted(self, "params_")
        X = check_tensor(X, ndim=4, name="X", dtype=self.dtype)
        if X.shape[-1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[-1]} channels, layer was fitted with {self.n_features_in_}")
        return hy.hydra_forward(X, self.plan_, self.params_, deterministic=self.deterministic,
                                attn_drop=self.attn_drop, proj_drop=self.proj_drop,
                                rng=self._dropout_rng, capture=capture)

    def forward_backward(self, X, upstream):
        """Forward pass plus exact gradients; returns ``(output, grads)``."""
        check_is_fitted(self, "params_")
        X = check_tensor(X, ndim=4, name="X", dtype=self.dtype)
        cache = hy.HydraCache()
        out = hy.hydra_forward(X, self.plan_, self.params_, cache=cache)
        return out, hy.hydra_backward(cache, upstream)

    def count_params(self):
        check_is_fitted(self, "params_")
        return hy.count_params(self.n_features_in_, self.plan_, self.qkv_bias)

    def count_macs(self, height, width, batch=1):
        check_is_fitted(self, "params_")
        return hy.count_macs(self.n_features_in_, self.plan_, height, width, batch)


class StyleNATGenerator(TransformerMixin, BaseEstimator):
    """Latent-to-image generator; ``transform`` maps ``[B, latent_dim]`` latents to ``[B, 3, R, R]``.

    ``fit`` ignores ``X`` beyond checking its width, so ``fit()`` with no
    data is allowed.
    """

    def __init__(self, target=32, design="2split", channels=None, heads=None, min_heads=1,
                 num_splits_by_level=None, latent_dim=512, mapping_layers=8, random_state=0, dtype="f32"):
        self.target = target
        self.design = design
        self.channels = channels
        self.heads = heads
        self.min_heads = min_heads
        self.num_splits_by_level = num_splits_by_level
        self.latent_dim = latent_dim
        self.mapping_layers = mapping_layers
        self.random_state = random_state
        self.dtype = dtype

    def _config(self):
        doc = {"target": self.target, "design": self.design, "channels": self.channels,
               "heads": self.heads, "min_heads": self.min_heads, "latent_dim": self.latent_dim,
               "mapping_layers": self.mapping_layers,
               "seed": self.random_state if isinstance(self.random_state, int) else 0}
        if self.num_splits_by_level is not None:
            doc["num_splits_by_level"] = self.num_splits_by_level
        return gen.config_from_dict(doc)

    def fit(self, X=None, y=None, params=None):
        cfg = self._config()
        if X is not None:
            X = check_tensor(X, ndim=2, name="X", dtype=self.dtype)
            if X.shape[1] != cfg.latent_dim:
                raise DimensionError(f"latents have width {X.shape[1]}, expected {cfg.latent_dim}")
        self.config_ = cfg
        if params is None:
            params = gen.init_generator_params(cfg, make_rng(_seed(self.random_state)), check_dtype(self.dtype))
        self.params_ = gen.check_params(cfg, params)
        self.n_features_in_ = cfg.latent_dim
        return self

    def transform(self, X, capture=None):
        check_is_fitted(self, "params_")
        X = check_tensor(X, ndim=2, name="X", dtype=self.dtype)
        w = gen.mapping_forward(X, self.params_, self.config_.mapping_layers)
        return gen.synthesis_forward(w, self.config_, self.params_, capture=capture)

    def sample(self, n_samples=1, random_state=None, capture=None):
        check_is_fitted(self, "params_")
        z = gen.sample_latents(make_rng(_seed(random_state)), n_samples, self.config_.latent_dim,
                               check_dtype(self.dtype))
        return self.transform(z, capture=capture)

    def count_params(self):
        check_is_fitted(self, "config_")
        return gen.count_generator_params(self.config_)
