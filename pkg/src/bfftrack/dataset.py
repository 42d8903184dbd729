"""Fingerprint dataset file format and reader.

Layout (all little-endian):

  header: magic ``BFF1`` | u32 version | u32 M | u32 N_s | u32 grid_nx |
          u32 grid_ny | f64 extent_x | f64 extent_y | f64 tx_x | f64 tx_y |
          u64 seed | f64 threshold_eta | f64 bandwidth | f64 sample_interval |
          f64 max_excess_delay | f64 amplitude | f64 power_cap | f64 floor |
          f64 shadow_sigma
  per record: f64 x | f64 y | ceil(M*N_s/8) bytes of row-major packed bits

Records are ordered x-fastest: record n holds grid node
(ix, iy) = (n % grid_nx, n // grid_nx). Each record's random stream is keyed
by its index, so serial and parallel builds produce identical bytes.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .channel import Codebook, Environment, SounderConfig, fingerprint
from .ioutil import atomic_write_bytes

MAGIC = b"BFF1"
VERSION = 1
_HEADER = struct.Struct("<4s5I4dQ8d")


class DataFormatError(ValueError):
    """Unreadable or incompatible dataset file."""


def record_rng(master_seed: int, record_index: int):
    """Random generator for one grid record, independent of build order."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(record_index),))
    )


def build_dataset(env: Environment, cfg: SounderConfig, codebook: Codebook, path,
                  master_seed=None, shadow_sigma_db=6.0):
    """Synthesize fingerprints for every grid node and write them to ``path``.

    Returns the number of records written (always grid_nx * grid_ny).
    """
    seed = env.rng_seed if master_seed is None else int(master_seed)
    m, n_s = codebook.m, cfg.n_samples_ns
    xs, ys = env.grid_xs(), env.grid_ys()
    n_bytes = (m * n_s + 7) // 8

    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC,
            VERSION,
            m,
            n_s,
            env.grid_nx,
            env.grid_ny,
            env.extent_x,
            env.extent_y,
            env.tx_position[0],
            env.tx_position[1],
            seed,
            cfg.threshold_eta_dbm,
            cfg.bandwidth_b,
            cfg.sample_interval_ts,
            cfg.max_excess_delay_t,
            cfg.sounding_amplitude_s,
            cfg.max_rx_power_cap_dbm,
            cfg.floor_dbm,
            shadow_sigma_db,
        )
    )
    record = struct.Struct("<2d")
    for n in range(env.grid_nx * env.grid_ny):
        ix, iy = n % env.grid_nx, n // env.grid_nx
        rx = (float(xs[ix]), float(ys[iy]))
        fp = fingerprint(env, cfg, codebook, rx, record_rng(seed, n), shadow_sigma_db)
        packed = np.packbits(fp.bits.reshape(-1))
        if packed.size != n_bytes:
            raise DataFormatError(f"packed row size {packed.size} != {n_bytes}")
        buf.write(record.pack(rx[0], rx[1]))
        buf.write(packed.tobytes())
    atomic_write_bytes(path, buf.getvalue())
    return env.grid_nx * env.grid_ny


class BffDataset:
    """Random-access reader over a fingerprint dataset file."""

    def __init__(self, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size or raw[:4] != MAGIC:
            raise DataFormatError(f"{path}: not a fingerprint dataset")
        (
            _,
            version,
            self.m,
            self.n_s,
            self.grid_nx,
            self.grid_ny,
            self.extent_x,
            self.extent_y,
            tx_x,
            tx_y,
            self.seed,
            self.threshold_eta_dbm,
            self.bandwidth_b,
            self.sample_interval_ts,
            self.max_excess_delay_t,
            self.sounding_amplitude_s,
            self.max_rx_power_cap_dbm,
            self.floor_dbm,
            self.shadow_sigma_db,
        ) = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise DataFormatError(f"{path}: dataset version {version}, reader supports {VERSION}")
        self.tx_position = (tx_x, tx_y)
        n_records = self.grid_nx * self.grid_ny
        n_bytes = (self.m * self.n_s + 7) // 8
        body = raw[_HEADER.size :]
        rec = np.dtype([("pos", "<f8", (2,)), ("bits", "u1", (n_bytes,))])
        if len(body) != n_records * rec.itemsize:
            raise DataFormatError(
                f"{path}: expected {n_records} records "
                f"({n_records * rec.itemsize} bytes), found {len(body)} bytes"
            )
        table = np.frombuffer(body, dtype=rec)
        self.positions = np.ascontiguousarray(table["pos"])
        self._packed = np.ascontiguousarray(table["bits"])

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.m * self.n_s

    def index_of(self, ix, iy):
        if not (0 <= ix < self.grid_nx and 0 <= iy < self.grid_ny):
            raise IndexError(f"grid index ({ix}, {iy}) out of range")
        return iy * self.grid_nx + ix

    def bits(self, n):
        """(M, N_s) uint8 fingerprint of record ``n``."""
        row = np.unpackbits(self._packed[n])[: self.feature_dim]
        return row.reshape(self.m, self.n_s)

    def features(self, indices):
        """Float feature rows (flattened bits) for an index or index array."""
        idx = np.asarray(indices)
        flat = np.unpackbits(self._packed[idx.reshape(-1)], axis=-1)[:, : self.feature_dim]
        out = flat.astype(np.float64)
        if idx.ndim == 0:
            return out[0]
        return out.reshape(idx.shape + (self.feature_dim,))

    def grid_xs(self):
        return np.linspace(-self.extent_x / 2.0, self.extent_x / 2.0, self.grid_nx)

    def grid_ys(self):
        return np.linspace(-self.extent_y / 2.0, self.extent_y / 2.0, self.grid_ny)
