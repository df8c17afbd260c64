"""Vectorised open-addressing hash table from packed 3D integer keys to row indices."""

import numpy as np

_EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_BIAS = 1 << 20
_MASK21 = (1 << 21) - 1


def pack_keys(ijk):
    """Pack signed (i, j, k) triples into uint64, 21 bits per axis.

    Coordinates must lie in [-2**20, 2**20).
    """
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    if ijk.size and (ijk.min() < -_BIAS or ijk.max() >= _BIAS):
        raise ValueError("voxel coordinate out of packable range")
    b = (ijk + _BIAS).astype(np.uint64)
    return (b[:, 0] << np.uint64(42)) | (b[:, 1] << np.uint64(21)) | b[:, 2]


def unpack_keys(packed):
    packed = np.asarray(packed, dtype=np.uint64)
    m = np.uint64(_MASK21)
    i = ((packed >> np.uint64(42)) & m).astype(np.int64) - _BIAS
    j = ((packed >> np.uint64(21)) & m).astype(np.int64) - _BIAS
    k = (packed & m).astype(np.int64) - _BIAS
    return np.stack([i, j, k], axis=1)


class KeyTable:
    """Linear-probing table mapping packed keys to dense indices 0..n-1.

    Indices are assigned in first-insertion order and never change, so
    callers can keep per-entry data in parallel append-only arrays.
    """

    def __init__(self, capacity=1024):
        cap = 1
        while cap < capacity:
            cap <<= 1
        self._alloc(cap)
        self.size = 0

    def _alloc(self, cap):
        self.capacity = cap
        self._bits = cap.bit_length() - 1
        self._slots = np.full(cap, _EMPTY, dtype=np.uint64)
        self._values = np.full(cap, -1, dtype=np.int64)

    def __len__(self):
        return self.size

    def _home(self, packed):
        with np.errstate(over="ignore"):
            h = packed * _GOLDEN
        return (h >> np.uint64(64 - self._bits)).astype(np.int64)

    def lookup(self, packed):
        """Return the index of each key, or -1 where absent."""
        packed = np.asarray(packed, dtype=np.uint64)
        out = np.full(packed.shape[0], -1, dtype=np.int64)
        if packed.shape[0] == 0 or self.size == 0:
            return out
        mask = self.capacity - 1
        slot = self._home(packed)
        pending = np.arange(packed.shape[0])
        while pending.size:
            s = slot[pending]
            stored = self._slots[s]
            hit = stored == packed[pending]
            out[pending[hit]] = self._values[s[hit]]
            go_on = ~(hit | (stored == _EMPTY))
            pending = pending[go_on]
            slot[pending] = (slot[pending] + 1) & mask
        return out

    def _place(self, packed, values):
        mask = self.capacity - 1
        slot = self._home(packed)
        pending = np.arange(packed.shape[0])
        while pending.size:
            s = slot[pending]
            free = self._slots[s] == _EMPTY
            cand = pending[free]
            # one winner per contested slot; the rest keep probing
            _, first = np.unique(slot[cand], return_index=True)
            won = np.zeros(pending.size, dtype=bool)
            won_idx = np.flatnonzero(free)[first]
            won[won_idx] = True
            w = pending[won]
            self._slots[slot[w]] = packed[w]
            self._values[slot[w]] = values[w]
            pending = pending[~won]
            slot[pending] = (slot[pending] + 1) & mask

    def insert(self, packed):
        """Return indices for all keys, allocating new ones for absent keys.

        Second return value is a boolean mask of keys that were newly created
        (only the first occurrence of a duplicated new key is flagged).
        """
        packed = np.asarray(packed, dtype=np.uint64)
        idx = self.lookup(packed)
        missing = np.flatnonzero(idx < 0)
        created = np.zeros(packed.shape[0], dtype=bool)
        if missing.size == 0:
            return idx, created
        uniq, first, inv = np.unique(packed[missing], return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        new_vals = self.size + rank
        need = self.size + uniq.size
        if need * 2 > self.capacity:
            self._grow(need * 2)
        self._place(uniq, new_vals)
        self.size = need
        idx[missing] = new_vals[inv]
        created[missing[first]] = True
        return idx, created

    def _grow(self, min_capacity):
        old_slots, old_values = self._slots, self._values
        cap = self.capacity
        while cap < min_capacity:
            cap <<= 1
        self._alloc(cap)
        used = old_slots != _EMPTY
        self._place(old_slots[used], old_values[used])
