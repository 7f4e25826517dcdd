"""Stacked RNN / GRU / LSTM over (N, T, F) sequences.

The stack returns the final hidden state of its top layer, shape (N, H).
Gate equations (sigma = logistic, * elementwise):

    RNN   h' = tanh(Wx x + Wh h + b)
    GRU   r = sigma(..), z = sigma(..), n = tanh(Wx_n x + Wh_n (r * h) + b_n)
          h' = (1 - z) * n + z * h
    LSTM  i, f, o = sigma(..), g = tanh(..), c' = f * c + i * g, h' = o * tanh(c')

Per layer, ``wx`` stacks the input weights of all gates (gate order r,z,n for
GRU and i,f,g,o for LSTM), ``wh`` the recurrent weights and ``b`` the biases.
"""
from __future__ import annotations

import numpy as np

from .layers import DimensionError, Layer, _uniform, sigmoid

N_GATES = {"rnn": 1, "gru": 3, "lstm": 4}
KIND_NAMES = {"rnn": "RNNCellStack", "gru": "GRUCellStack", "lstm": "LSTMCellStack"}


class RecurrentStack(Layer):
    def __init__(self, cell, input_size, hidden_size, num_layers=2):
        cell = cell.lower()
        if cell not in N_GATES:
            raise ValueError(f"unknown recurrent cell {cell!r}")
        self.kind = KIND_NAMES[cell]
        super().__init__()
        self.cell = cell
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        self.num_layers = int(num_layers)
        if self.num_layers < 1 or self.hidden_size < 1:
            raise ValueError("recurrent stack needs >= 1 layer and hidden size")
        # optional initial hidden state per layer, shape (H,) or (N, H)
        self.h0 = None

    def spec(self):
        return {"kind": self.kind, "input_size": self.input_size,
                "hidden_size": self.hidden_size, "num_layers": self.num_layers}

    def init_params(self, rng, dtype):
        g, h = N_GATES[self.cell], self.hidden_size
        for layer in range(self.num_layers):
            f = self.input_size if layer == 0 else h
            self.params[f"l{layer}.wx"] = _uniform(rng, f, (g * h, f), dtype)
            self.params[f"l{layer}.wh"] = _uniform(rng, h, (g * h, h), dtype)
            self.params[f"l{layer}.b"] = np.zeros(g * h, dtype=dtype)

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.input_size:
            raise DimensionError(f"{self.name} expects (T, {self.input_size}) input, got {tuple(shape)}")
        if shape[0] < 1:
            raise DimensionError(f"{self.name}: empty sequence")
        return (self.hidden_size,)

    def _initial(self, layer, n, dtype):
        if self.h0 is None:
            return np.zeros((n, self.hidden_size), dtype=dtype)
        return np.broadcast_to(np.asarray(self.h0[layer], dtype=dtype), (n, self.hidden_size)).copy()

    # ------------------------------------------------------------ forward

    def forward(self, x, training=False, rng=None):
        caches = []
        seq = x
        for layer in range(self.num_layers):
            seq, cache = self._layer_forward(layer, seq)
            caches.append(cache)
        if training:
            self._cache = caches
        return seq[:, -1]

    def _layer_forward(self, layer, x):
        n, t_len, _ = x.shape
        h_size = self.hidden_size
        wx = self.params[f"l{layer}.wx"]
        wh = self.params[f"l{layer}.wh"]
        b = self.params[f"l{layer}.b"]
        xp = x @ wx.T + b  # (N, T, G*H)
        h = self._initial(layer, n, x.dtype)
        hs = np.empty((n, t_len, h_size), dtype=x.dtype)
        steps = []
        if self.cell == "rnn":
            for t in range(t_len):
                h_prev = h
                h = np.tanh(xp[:, t] + h_prev @ wh.T)
                hs[:, t] = h
                steps.append((h_prev, h))
        elif self.cell == "gru":
            wh_rz, wh_n = wh[:2 * h_size], wh[2 * h_size:]
            for t in range(t_len):
                h_prev = h
                rz = sigmoid(xp[:, t, :2 * h_size] + h_prev @ wh_rz.T)
                r, z = rz[:, :h_size], rz[:, h_size:]
                rh = r * h_prev
                nn_ = np.tanh(xp[:, t, 2 * h_size:] + rh @ wh_n.T)
                h = (1.0 - z) * nn_ + z * h_prev
                hs[:, t] = h
                steps.append((h_prev, r, z, rh, nn_))
        else:
            c = np.zeros_like(h)
            for t in range(t_len):
                h_prev, c_prev = h, c
                a = xp[:, t] + h_prev @ wh.T
                i = sigmoid(a[:, :h_size])
                f = sigmoid(a[:, h_size:2 * h_size])
                g = np.tanh(a[:, 2 * h_size:3 * h_size])
                o = sigmoid(a[:, 3 * h_size:])
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                hs[:, t] = h
                steps.append((h_prev, c_prev, i, f, g, o, tc))
        return hs, (x, steps)

    # ------------------------------------------------------------ backward

    def backward(self, dy):
        caches = self._take_cache()
        n = dy.shape[0]
        t_len = caches[0][0].shape[1]
        dseq = np.zeros((n, t_len, self.hidden_size), dtype=dy.dtype)
        dseq[:, -1] = dy
        for layer in reversed(range(self.num_layers)):
            dseq = self._layer_backward(layer, caches[layer], dseq)
        return dseq

    def _layer_backward(self, layer, cache, dhs):
        x, steps = cache
        n, t_len, _ = x.shape
        h_size = self.hidden_size
        wx = self.params[f"l{layer}.wx"]
        wh = self.params[f"l{layer}.wh"]
        dxp = np.zeros((n, t_len, wx.shape[0]), dtype=dhs.dtype)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((n, h_size), dtype=dhs.dtype)
        if self.cell == "rnn":
            for t in reversed(range(t_len)):
                h_prev, h = steps[t]
                da = (dhs[:, t] + dh_next) * (1.0 - h * h)
                dxp[:, t] = da
                dwh += da.T @ h_prev
                dh_next = da @ wh
        elif self.cell == "gru":
            wh_rz, wh_n = wh[:2 * h_size], wh[2 * h_size:]
            for t in reversed(range(t_len)):
                h_prev, r, z, rh, nn_ = steps[t]
                dh = dhs[:, t] + dh_next
                da_n = dh * (1.0 - z) * (1.0 - nn_ * nn_)
                dz = dh * (h_prev - nn_)
                drh = da_n @ wh_n
                da_r = drh * h_prev * r * (1.0 - r)
                da_z = dz * z * (1.0 - z)
                da_rz = np.concatenate([da_r, da_z], axis=1)
                dxp[:, t, :2 * h_size] = da_rz
                dxp[:, t, 2 * h_size:] = da_n
                dwh[:2 * h_size] += da_rz.T @ h_prev
                dwh[2 * h_size:] += da_n.T @ rh
                dh_next = dh * z + drh * r + da_rz @ wh_rz
        else:
            dc_next = np.zeros_like(dh_next)
            for t in reversed(range(t_len)):
                h_prev, c_prev, i, f, g, o, tc = steps[t]
                dh = dhs[:, t] + dh_next
                do = dh * tc
                dc = dh * o * (1.0 - tc * tc) + dc_next
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                da = np.concatenate([
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ], axis=1)
                dxp[:, t] = da
                dwh += da.T @ h_prev
                dh_next = da @ wh
                dc_next = dc * f
        self.grads[f"l{layer}.wx"] = dxp.reshape(-1, dxp.shape[2]).T @ x.reshape(-1, x.shape[2])
        self.grads[f"l{layer}.wh"] = dwh
        self.grads[f"l{layer}.b"] = dxp.sum(axis=(0, 1))
        return dxp @ wx
