"""Global BEV fusion: depth-modulated cross-attention plus residual aggregation.

The LiDAR-side BEV map forms the queries after the depth encoding is
embedded into them; the image-side BEV map provides keys and values. A
residual/norm/FFN stage aggregates the attended features back with the
LiDAR stream.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .depth import DepthEncoding
from .errors import ConfigError, DimensionError
from .geometry import BevFeatureMap
from .stubs import dense_init, prefix_params
from .tensor import Tensor

EMBED_MODES = ("multiply", "sum", "concat")


class GlobalFusionBlock:
    """Multi-head cross-attention over flattened BEV tokens.

    ``embed_mode`` controls how the depth encoding enters the query:
    elementwise product (default), elementwise sum, or channel concat
    followed by a linear map back to C.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 embed_mode: str = "multiply", ffn_mult: int = 2):
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {EMBED_MODES}, got {embed_mode!r}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.embed_mode = embed_mode

        def w(d_in, d_out, scale=None):
            return Tensor(dense_init(rng, d_in, d_out, scale), requires_grad=True)

        hd = self.head_dim
        # query/key projections start small so early attention is near uniform
        qk_scale = 0.25 * np.sqrt(2.0 / (channels + hd))
        self.q_proj = [w(channels, hd, qk_scale) for _ in range(heads)]
        self.k_proj = [w(channels, hd, qk_scale) for _ in range(heads)]
        self.v_proj = [w(channels, hd) for _ in range(heads)]
        self.out_proj = w(channels, channels)
        self.concat_embed = w(2 * channels, channels) if embed_mode == "concat" else None

        c_ff = ffn_mult * channels
        self.norm1_gain = Tensor(np.ones(channels), requires_grad=True)
        self.norm1_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.norm2_gain = Tensor(np.ones(channels), requires_grad=True)
        self.norm2_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.ffn_w1 = w(channels, c_ff)
        self.ffn_b1 = Tensor(np.zeros(c_ff), requires_grad=True)
        self.ffn_w2 = w(c_ff, channels)
        self.ffn_b2 = Tensor(np.zeros(channels), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for h in range(self.heads):
            out += [(f"head{h}.q", self.q_proj[h]), (f"head{h}.k", self.k_proj[h]),
                    (f"head{h}.v", self.v_proj[h])]
        out.append(("out_proj", self.out_proj))
        if self.concat_embed is not None:
            out.append(("concat_embed", self.concat_embed))
        out += [("norm1.gain", self.norm1_gain), ("norm1.bias", self.norm1_bias),
                ("norm2.gain", self.norm2_gain), ("norm2.bias", self.norm2_bias),
                ("ffn.w1", self.ffn_w1), ("ffn.b1", self.ffn_b1),
                ("ffn.w2", self.ffn_w2), ("ffn.b2", self.ffn_b2)]
        return prefix_params("global_fusion", out)

    # -- query embedding ----------------------------------------------------

    def _embed_tokens(self, base: Tensor, depth_tok: Tensor) -> Tensor:
        if self.embed_mode == "multiply":
            return T.mul(base, depth_tok)
        if self.embed_mode == "sum":
            return T.add(base, depth_tok)
        return T.linear(T.concat_last([base, depth_tok]), self.concat_embed)

    def _embed_arrays(self, base: np.ndarray, depth_tok: np.ndarray) -> np.ndarray:
        if self.embed_mode == "multiply":
            return base * depth_tok
        if self.embed_mode == "sum":
            return base + depth_tok
        return np.concatenate([base, depth_tok], axis=-1) @ self.concat_embed.data

    def _check_inputs(self, v_bev: BevFeatureMap, i_bev: BevFeatureMap,
                      pos: np.ndarray, depth_enc: DepthEncoding) -> tuple[int, int]:
        if v_bev.grid != i_bev.grid:
            raise DimensionError("LiDAR and image BEV maps use different grids")
        n = v_bev.grid.n_cells
        c = self.channels
        for name, shape in (("lidar", v_bev.features.shape), ("image", i_bev.features.shape),
                            ("positional", pos.shape), ("depth", depth_enc.channels.shape)):
            if shape[-1] != c:
                raise DimensionError(f"{name} features have {shape[-1]} channels, block expects {c}")
        return n, c

    # -- attention ----------------------------------------------------------

    def attend(self, v_bev: BevFeatureMap, i_bev: BevFeatureMap, pos: np.ndarray,
               depth_enc: DepthEncoding, return_attention: bool = False):
        """Depth-modulated cross-attention; returns the interacted BEV map.

        With an active tape this records a differentiable op graph and
        materializes the n x n attention; without one it runs a tiled
        numpy path that keeps memory bounded at full resolution.
        """
        n, c = self._check_inputs(v_bev, i_bev, pos, depth_enc)
        if T.active_tape() is not None:
            return self._attend_taped(v_bev, i_bev, pos, depth_enc, return_attention)
        out, _, att = self._attend_arrays(
            v_bev.features.data.reshape(n, c), i_bev.features.data.reshape(n, c),
            pos.reshape(n, c), depth_enc.channels.reshape(n, c),
            keep_attention=return_attention)
        out_map = BevFeatureMap(grid=v_bev.grid,
                                features=Tensor(out.reshape(v_bev.features.shape)))
        return (out_map, att) if return_attention else out_map

    def _attend_taped(self, v_bev, i_bev, pos, depth_enc, return_attention):
        n, c = v_bev.grid.n_cells, self.channels
        v_tok = T.reshape(v_bev.features, (n, c))
        i_tok = T.reshape(i_bev.features, (n, c))
        p_tok = Tensor(pos.reshape(n, c))
        d_tok = Tensor(depth_enc.channels.reshape(n, c))

        q_in = self._embed_tokens(T.add(v_tok, p_tok), d_tok)
        k_in = T.add(i_tok, p_tok)
        scale = 1.0 / np.sqrt(self.head_dim)

        head_outs = []
        attentions = []
        for h in range(self.heads):
            q = T.matmul(q_in, self.q_proj[h])
            k = T.matmul(k_in, self.k_proj[h])
            v = T.matmul(i_tok, self.v_proj[h])
            att = T.softmax_last(T.scale(T.matmul(q, T.transpose(k)), scale))
            head_outs.append(T.matmul(att, v))
            attentions.append(att.data)
        out = T.linear(T.concat_last(head_outs), self.out_proj)
        out_map = BevFeatureMap(grid=v_bev.grid,
                                features=T.reshape(out, v_bev.features.shape))
        return (out_map, attentions) if return_attention else out_map

    def _attend_arrays(self, v_tok, i_tok, p_tok, d_tok, tile: int = 1024,
                       keep_attention: bool = False, collect_column_mass: bool = False):
        """Tiled pure-numpy attention; optionally accumulates received mass per key."""
        n = v_tok.shape[0]
        q_in = self._embed_arrays(v_tok + p_tok, d_tok)
        k_in = i_tok + p_tok
        scale = 1.0 / np.sqrt(self.head_dim)

        outs = []
        col_mass = np.zeros(n) if collect_column_mass else None
        atts = [] if keep_attention else None
        for h in range(self.heads):
            q = q_in @ self.q_proj[h].data
            k = k_in @ self.k_proj[h].data
            v = i_tok @ self.v_proj[h].data
            out_h = np.empty((n, self.head_dim))
            full_att = np.empty((n, n)) if keep_attention else None
            for lo in range(0, n, tile):
                hi = min(lo + tile, n)
                att = q[lo:hi] @ k.T
                att *= scale
                att -= att.max(axis=-1, keepdims=True)
                np.exp(att, out=att)
                att /= att.sum(axis=-1, keepdims=True)
                out_h[lo:hi] = att @ v
                if col_mass is not None:
                    col_mass += att.sum(axis=0)
                if full_att is not None:
                    full_att[lo:hi] = att
            outs.append(out_h)
            if atts is not None:
                atts.append(full_att)
        out = np.concatenate(outs, axis=-1) @ self.out_proj.data
        if col_mass is not None:
            col_mass /= self.heads * n  # mean received weight per key cell
        return out, col_mass, atts

    def attention_column_mass(self, v_bev: BevFeatureMap, i_bev: BevFeatureMap,
                              pos: np.ndarray, depth_enc: DepthEncoding,
                              tile: int = 1024) -> np.ndarray:
        """Mean attention weight each image key cell receives, flattened (n,).

        Rows of the attention matrix sum to one, so a uniform model yields
        1/n everywhere; values above that mark cells the block prefers.
        """
        n, c = self._check_inputs(v_bev, i_bev, pos, depth_enc)
        _, mass, _ = self._attend_arrays(
            v_bev.features.data.reshape(n, c), i_bev.features.data.reshape(n, c),
            pos.reshape(n, c), depth_enc.channels.reshape(n, c),
            tile=tile, collect_column_mass=True)
        return mass

    # -- aggregation --------------------------------------------------------

    def fuse(self, v_hat: BevFeatureMap, v_bev: BevFeatureMap) -> BevFeatureMap:
        """Residual + norm + position-wise FFN + norm."""
        if v_hat.features.shape != v_bev.features.shape:
            raise DimensionError(
                f"fuse shapes differ: {v_hat.features.shape} vs {v_bev.features.shape}")
        r = T.layer_norm(T.add(v_hat.features, v_bev.features), self.norm1_gain, self.norm1_bias)
        ffn = T.linear(T.softplus(T.linear(r, self.ffn_w1, self.ffn_b1)),
                       self.ffn_w2, self.ffn_b2)
        out = T.layer_norm(T.add(ffn, r), self.norm2_gain, self.norm2_bias)
        return BevFeatureMap(grid=v_bev.grid, features=out)

    def forward(self, v_bev: BevFeatureMap, i_bev: BevFeatureMap, pos: np.ndarray,
                depth_enc: DepthEncoding) -> BevFeatureMap:
        return self.fuse(self.attend(v_bev, i_bev, pos, depth_enc), v_bev)
