"""Discrete latent codebook: nearest-entry quantization, VQ losses and dead-code restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

HAND = "hand"
OBJECT = "object"
SHAPE_CLASSES = (HAND, OBJECT)

INITIAL_RESTART_INTERVAL = 25


class Codebook(nn.Module):
    """K x V embedding table with usage bookkeeping for the restart schedule.

    ``restart_interval`` starts at 25 batches and doubles at every restart
    event, whether or not any entry was actually replaced.
    """

    def __init__(self, num_codes: int = 512, code_dim: int = 128, seed: int = 0,
                 restart_interval: int = INITIAL_RESTART_INTERVAL):
        super().__init__()
        if num_codes < 1:
            raise ValueError("codebook needs at least one entry")
        if restart_interval < INITIAL_RESTART_INTERVAL:
            raise ValueError(f"restart_interval must be >= {INITIAL_RESTART_INTERVAL}")
        gen = torch.Generator().manual_seed(seed)
        init = (torch.rand(num_codes, code_dim, generator=gen) * 2 - 1) / num_codes
        self.entries = nn.Parameter(init)
        self.register_buffer("usage_counts", torch.zeros(num_codes, dtype=torch.int64))
        self.restart_interval = int(restart_interval)
        self.batches_since_restart = 0
        self.restarts = 0

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]

    def metadata(self) -> dict:
        return {
            "K": self.num_codes,
            "V": self.code_dim,
            "restart_interval": self.restart_interval,
            "batches_since_restart": self.batches_since_restart,
            "restarts": self.restarts,
        }

    def load_metadata(self, meta: dict) -> None:
        self.restart_interval = int(meta["restart_interval"])
        self.batches_since_restart = int(meta["batches_since_restart"])
        self.restarts = int(meta.get("restarts", 0))


def nearest_indices(z: torch.Tensor, entries: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Row-wise argmin of squared L2 distance; ties resolve to the smallest index.

    Distances are formed from explicit differences (not the expanded
    ``|z|^2 - 2 z.e + |e|^2`` form) so that exact ties stay exact.
    """
    out = []
    for s in range(0, z.shape[0], chunk):
        d = ((z[s:s + chunk, None, :] - entries[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.int64)
    return torch.cat(out)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.ascontiguousarray(x), dtype=like.dtype)


@torch.no_grad()
def quantize(z_e, book: Codebook, track_usage: bool = True) -> tuple[int, torch.Tensor]:
    """Snap one encoder output to its nearest codebook entry."""
    z = _as_tensor(z_e, book.entries).reshape(-1)
    if z.shape[0] != book.code_dim:
        raise ValueError(f"expected a {book.code_dim}-vector, got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("non-finite encoder output")
    entries = book.entries.detach().to(z.dtype)
    idx = int(nearest_indices(z[None], entries)[0])
    if track_usage:
        book.usage_counts[idx] += 1
    return idx, book.entries.detach()[idx].clone()


@torch.no_grad()
def quantize_codes(z: torch.Tensor, book: Codebook, track_usage: bool = True) -> torch.Tensor:
    """Quantize a (..., V) tensor to (...) indices, counting usage once per vector."""
    flat = z.detach().reshape(-1, book.code_dim)
    if not torch.isfinite(flat).all():
        raise ValueError("non-finite encoder output")
    idx = nearest_indices(flat, book.entries.detach().to(flat.dtype))
    if track_usage:
        book.usage_counts += torch.bincount(idx, minlength=book.num_codes)
    return idx.reshape(z.shape[:-1])


def quantize_cube(continuous, book: Codebook, track_usage: bool = True) -> np.ndarray:
    """(n, n, n, V) continuous latent cube -> (n, n, n) integer index cube."""
    z = _as_tensor(continuous, book.entries)
    if z.ndim != 4 or z.shape[-1] != book.code_dim:
        raise ValueError(f"expected an (n, n, n, {book.code_dim}) cube, got {tuple(z.shape)}")
    return quantize_codes(z, book, track_usage).numpy().astype(np.int64)


def lookup(indices, book: Codebook) -> torch.Tensor:
    """Index cube -> continuous cube of codebook entries (differentiable w.r.t. entries)."""
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.int64)
    if idx.numel() and (idx.min() < 0 or idx.max() >= book.num_codes):
        raise ValueError(f"index out of range for a codebook of {book.num_codes} entries")
    return book.entries[idx]


def vq_losses(z_e: torch.Tensor, codes: torch.Tensor, beta: float = 0.25) -> tuple[torch.Tensor, torch.Tensor]:
    """Codebook and commitment terms, each a batch mean of per-vector squared L2 norms.

    The codebook term only moves the entries, the commitment term only the encoder.
    """
    if z_e.shape != codes.shape:
        raise ValueError(f"shape mismatch {tuple(z_e.shape)} vs {tuple(codes.shape)}")
    vq_term = ((z_e.detach() - codes) ** 2).sum(-1).mean()
    commit_term = beta * ((z_e - codes.detach()) ** 2).sum(-1).mean()
    return vq_term, commit_term


def straight_through(z_e: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Forward value equals ``codes``; gradient passes to ``z_e`` unchanged."""
    return z_e + (codes - z_e).detach()


@dataclass
class RestartEvent:
    replaced: list[int]
    next_interval: int


@torch.no_grad()
def restart_unused(book: Codebook, replacement_pool, rng_seed: int) -> RestartEvent | None:
    """Advance the batch counter; at an interval boundary, re-seed unused entries.

    Unused entries are overwritten with vectors drawn uniformly (with
    replacement) from ``replacement_pool``.  Returns the event on a restart,
    ``None`` otherwise.
    """
    book.batches_since_restart += 1
    if book.batches_since_restart < book.restart_interval:
        return None
    unused = torch.nonzero(book.usage_counts == 0).reshape(-1)
    if len(unused):
        pool = _as_tensor(replacement_pool, book.entries).detach().reshape(-1, book.code_dim)
        if pool.shape[0] == 0:
            raise ValueError("empty replacement pool with unused codes to restart")
        gen = torch.Generator().manual_seed(int(rng_seed))
        pick = torch.randint(pool.shape[0], (len(unused),), generator=gen)
        book.entries.data[unused] = pool[pick].to(book.entries.dtype)
    book.usage_counts.zero_()
    book.restart_interval *= 2
    book.batches_since_restart = 0
    book.restarts += 1
    return RestartEvent(replaced=[int(i) for i in unused], next_interval=book.restart_interval)
