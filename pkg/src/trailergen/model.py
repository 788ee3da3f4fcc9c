"""End-to-end sequence-to-sequence model.

``TrailerModel`` owns the learnable pieces (SOS/EOS vectors, trailerness
encoder, context encoder, decoder stack, optional condition components) and
provides both call styles:

* unbatched 2-D paths used by inference and by the op-level contract tests;
* batched 3-D paths with padding masks used by the training loop.

Submodules draw their init values from per-component seed streams, so e.g. a
conditioned and an unconditioned model built from the same seed share
identical base weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, Parameter, ShapeError, Tensor
from .conditioning import augment_context
from .config import ModelConfig
from .decoder import DecodedTrailer, DecoderStack, detect_eos, match_nearest, match_similarities
from .encoder import ContextEncoder, TrailernessEncoder, fuse_trailerness
from .layers import EncoderLayer, Linear
from .shots import ShotSequence, positional_encoding


@dataclass
class EncodeResult:
    memory: Tensor              # context sequence the decoder attends over
    valid: np.ndarray           # framed-position validity (batched) or None
    scores: Tensor | None       # per-position trailerness, None when the encoder is ablated
    framed_pos: Tensor          # framed input with positions added (pre-fusion)
    lengths: np.ndarray         # framed lengths n_i + 2


def _as_embedding_array(movie) -> np.ndarray:
    return movie.embeddings if isinstance(movie, ShotSequence) else np.asarray(movie)


class TrailerModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        streams = {name: np.random.default_rng([seed, i]) for i, name in enumerate(
            ("tokens", "trailerness", "context", "decoder", "condition", "extras"))}

        tok = streams["tokens"]
        self.sos = Parameter(tok.normal(0.0, 0.02, size=d))
        self.eos = Parameter(tok.normal(0.0, 0.02, size=d))

        self.trailerness = (TrailernessEncoder(cfg, streams["trailerness"])
                            if cfg.use_trailerness_encoder else None)
        self.score_direction = None
        if cfg.use_trailerness_encoder and cfg.score_fusion == "projected":
            self.score_direction = Parameter(streams["extras"].normal(0.0, 0.02, size=d))
        self.context = ContextEncoder(cfg, streams["context"]) if cfg.use_context_encoder else None
        self.decoder = DecoderStack(cfg, streams["decoder"])

        self.condition_proj = None
        self.condition_layer = None
        if cfg.condition_mode != "none":
            cond_dim = cfg.condition_dim or d
            if cond_dim != d:
                self.condition_proj = Linear(cond_dim, d, streams["condition"])
            if cfg.condition_mode == "contextualized":
                self.condition_layer = EncoderLayer(
                    d, cfg.num_heads, cfg.ff_dim, streams["condition"],
                    pre_norm=cfg.pre_norm, eps=cfg.layer_norm_eps)

        if cfg.position_mode == "learned":
            self.pos_table = Parameter(
                streams["extras"].normal(0.0, 0.02, size=(cfg.max_len + 2, d)))
            self._pos_const = None
        else:
            self.pos_table = None
            self._pos_const = positional_encoding(cfg.max_len, d)

    # -- shared plumbing ------------------------------------------------------

    def positional_rows(self, length: int) -> Tensor:
        if length > self.cfg.max_len + 2:
            raise ConfigurationError(
                f"sequence length {length} exceeds the position table "
                f"(max_len={self.cfg.max_len})")
        if self.pos_table is not None:
            return self.pos_table[:length]
        return Tensor(self._pos_const[:length])

    def frame_one(self, embeddings) -> Tensor:
        """[n, d] shots -> [n+2, d] with the SOS/EOS vectors at the ends."""
        arr = _as_embedding_array(embeddings)
        if arr.ndim != 2 or arr.shape[1] != self.cfg.d_model:
            raise ShapeError(f"expected [n, {self.cfg.d_model}] shots, got {arr.shape}")
        d = self.cfg.d_model
        return ad.concat(
            [ad.reshape(self.sos, (1, d)), Tensor(arr), ad.reshape(self.eos, (1, d))], axis=0)

    def frame_batch(self, movies: list) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Frame and zero-pad a batch; returns (tensor [B, L, d], valid [B, L], lengths)."""
        arrays = [_as_embedding_array(m) for m in movies]
        lengths = np.array([a.shape[0] + 2 for a in arrays], dtype=np.int64)
        full = int(lengths.max())
        d = self.cfg.d_model
        rows = []
        for arr in arrays:
            framed = self.frame_one(arr)
            pad = full - framed.shape[0]
            if pad:
                framed = ad.concat([framed, Tensor(np.zeros((pad, d)))], axis=0)
            rows.append(framed)
        return ad.stack(rows, axis=0), ad.padding_mask(lengths, full), lengths

    # -- encoder side -----------------------------------------------------------

    def _encode_core(self, framed_pos: Tensor, key_mask: np.ndarray | None):
        scores = None
        fused = framed_pos
        if self.trailerness is not None:
            scores = self.trailerness(framed_pos, key_mask)
            s = scores.detach() if self.cfg.stop_score_gradient else scores
            fused = fuse_trailerness(framed_pos, s, self.score_direction)
        memory = self.context(fused, key_mask) if self.context is not None else fused
        return memory, scores, fused

    def encode_single(self, movie) -> EncodeResult:
        framed = self.frame_one(movie)
        length = framed.shape[0]
        x = ad.add(framed, self.positional_rows(length))
        memory, scores, _ = self._encode_core(x, None)
        return EncodeResult(memory=memory, valid=None, scores=scores,
                            framed_pos=x, lengths=np.array([length]))

    def encode_batch(self, movies: list) -> EncodeResult:
        framed, valid, lengths = self.frame_batch(movies)
        x = ad.add(framed, self.positional_rows(framed.shape[1]))
        key_mask = valid[:, None, None, :]
        memory, scores, _ = self._encode_core(x, key_mask)
        return EncodeResult(memory=memory, valid=valid, scores=scores,
                            framed_pos=x, lengths=lengths)

    def attach_condition(self, enc: EncodeResult, conditions) -> tuple[Tensor, np.ndarray | None]:
        """Append (projected, optionally contextualized) condition rows to the memory."""
        if self.cfg.condition_mode == "none" or conditions is None:
            return enc.memory, enc.valid
        if enc.memory.ndim == 2:
            cond = _as_embedding_array(conditions)
            if cond.shape[0] == 0:
                return enc.memory, enc.valid
            memory, _ = augment_context(
                enc.memory, Tensor(cond), self.cfg.condition_mode,
                projection=self.condition_proj, extra_layer=self.condition_layer)
            return memory, None
        arrays = [_as_embedding_array(c) for c in conditions]
        if len(arrays) != enc.memory.shape[0]:
            raise ShapeError("need one condition per batched movie")
        cond_lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
        if np.all(cond_lengths == 0):
            return enc.memory, enc.valid
        if np.any(cond_lengths == 0):
            raise ConfigurationError("cannot batch empty with non-empty conditions")
        full = int(cond_lengths.max())
        stacked = []
        for arr in arrays:
            t = Tensor(arr)
            pad = full - arr.shape[0]
            if pad:
                t = ad.concat([t, Tensor(np.zeros((pad, arr.shape[1])))], axis=0)
            stacked.append(t)
        cond = ad.stack(stacked, axis=0)
        cond_valid = ad.padding_mask(cond_lengths, full)
        memory, mem_valid = augment_context(
            enc.memory, cond, self.cfg.condition_mode,
            projection=self.condition_proj, extra_layer=self.condition_layer,
            memory_valid=enc.valid, cond_valid=cond_valid)
        return memory, mem_valid

    # -- decoder side -------------------------------------------------------------

    def decode_teacher_forced(self, memory: Tensor, target) -> Tensor:
        """Unbatched training-style pass: rows predict v_1..v_m then EOS."""
        arr = _as_embedding_array(target)
        if arr.shape[0] < 1:
            raise ShapeError("teacher forcing needs at least one target shot")
        d = self.cfg.d_model
        inputs = ad.concat([ad.reshape(self.sos, (1, d)), Tensor(arr)], axis=0)
        t = inputs.shape[0]
        x = ad.add(inputs, self.positional_rows(t))
        return self.decoder(x, memory, ad.causal_mask(t), None)

    def decode_teacher_forced_batch(self, memory: Tensor, memory_valid: np.ndarray,
                                    trailers: list):
        """Batched pass; returns (predictions, target rows, row validity)."""
        arrays = [_as_embedding_array(t) for t in trailers]
        counts = np.array([a.shape[0] for a in arrays], dtype=np.int64)
        if np.any(counts < 1):
            raise ShapeError("every trailer needs at least one shot")
        width = int(counts.max()) + 1
        d = self.cfg.d_model
        sos_row = ad.reshape(self.sos, (1, d))
        eos_row = ad.reshape(self.eos, (1, d))
        inputs, targets = [], []
        for arr in arrays:
            pad = width - (arr.shape[0] + 1)
            zeros = Tensor(np.zeros((pad, d))) if pad else None
            inp = ad.concat([sos_row, Tensor(arr)], axis=0)
            tgt = ad.concat([Tensor(arr), eos_row], axis=0)
            if zeros is not None:
                inp = ad.concat([inp, zeros], axis=0)
                tgt = ad.concat([tgt, zeros], axis=0)
            inputs.append(inp)
            targets.append(tgt)
        x = ad.add(ad.stack(inputs, axis=0), self.positional_rows(width))
        row_valid = ad.padding_mask(counts + 1, width)
        self_mask = ad.causal_mask(width)[None, None] & row_valid[:, None, None, :]
        cross_mask = memory_valid[:, None, None, :] if memory_valid is not None else None
        preds = self.decoder(x, memory, self_mask, cross_mask)
        return preds, ad.stack(targets, axis=0), row_valid

    def generate(self, movie, condition=None, max_len: int = 32,
                 topk: int = 1) -> DecodedTrailer:
        """Autoregressive decode: grow the prefix until EOS or the step cap.

        Each decoded embedding is matched to movie shots immediately; the
        matched index feeds back instead of the raw prediction when the model
        is configured for retrieval feedback.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        movie_arr = _as_embedding_array(movie)
        cfg = self.cfg
        n = movie_arr.shape[0]
        k = min(max(1, topk), n)
        with ad.no_grad():
            enc = self.encode_single(movie_arr)
            memory, _ = self.attach_condition(enc, condition)
            rows = [ad.reshape(self.sos, (1, cfg.d_model))]
            kept, all_preds, matched = [], [], []
            topk_idx, topk_sims = [], []
            chosen: set[int] = set()
            terminated = "max_len"
            while True:
                x = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
                t = x.shape[0]
                x = ad.add(x, self.positional_rows(t))
                out = self.decoder(x, memory, ad.causal_mask(t), None)
                pred = np.array(out.data[-1])
                all_preds.append(pred)
                if detect_eos(pred, self.eos.data, movie_arr,
                              rule=cfg.eos_rule, threshold=cfg.eos_threshold):
                    terminated = "eos"
                    break
                exclude = chosen if cfg.no_repeat else None
                pool = n - len(chosen) if cfg.no_repeat else n
                if pool < 1:
                    break  # no-repeat pool exhausted; treated as hitting the cap
                ranked = match_nearest(pred, movie_arr, k=min(k, pool), exclude=exclude)
                sims = match_similarities(pred, movie_arr, ranked)
                matched.append(ranked[0])
                topk_idx.append(ranked)
                topk_sims.append(sims)
                if cfg.no_repeat:
                    chosen.add(ranked[0])
                kept.append(pred)
                if len(kept) >= max_len:
                    break
                feedback = movie_arr[ranked[0] - 1] if cfg.feedback == "retrieved" else pred
                rows.append(Tensor(np.asarray(feedback)[None, :]))
        embeddings = np.stack(kept) if kept else np.zeros((0, cfg.d_model))
        return DecodedTrailer(
            embeddings=embeddings,
            matched_indices=matched,
            terminated_by=terminated,
            topk_indices=topk_idx,
            topk_similarities=topk_sims,
            all_predictions=np.stack(all_preds) if all_preds else None,
        )
