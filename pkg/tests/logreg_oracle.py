"""Independent multinomial logistic regression used to check end-to-end training.

Shares no code with slr: the PRNG, the split, the batch protocol and the
features are rebuilt here in plain Python, and the model is trained with
torch autograd instead of a hand-written gradient.

Protocol replayed (documented behaviour of the package):
  * split: Fisher-Yates over 0..n-1 from the last index down, j = below(i+1);
    first floor-complement goes to train, then n//10 val, then n//10 test.
  * step s = 1..steps: partial Fisher-Yates draw of batch_size positions from
    a persistent train-position buffer; when s % eval_interval == 0 a second
    draw of val_batch_size positions from a persistent val buffer follows.
  * features: signed pixel scaling p/127.5 - 1 on the raw 784 pixels.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

M64 = 2**64


class PySplitMix:
    def __init__(self, seed):
        self.s = seed % M64

    def next(self):
        self.s = (self.s + 0x9E3779B97F4A7C15) % M64
        z = self.s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % M64
        return z ^ (z >> 31)

    def below(self, n):
        floor = (M64 - n) % n
        while True:
            x = self.next()
            if x >= floor:
                return x % n


def oracle_split(n, seed):
    perm = list(range(n))
    g = PySplitMix(seed)
    for i in range(n - 1, 0, -1):
        j = g.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    tenth = n // 10
    n_train = n - 2 * tenth
    return perm[:n_train], perm[n_train : n_train + tenth], perm[n_train + tenth :]


def _draw(g, buf, k):
    n = len(buf)
    for i in range(k):
        j = i + g.below(n - i)
        buf[i], buf[j] = buf[j], buf[i]
    return buf[:k]


def train_oracle(pixels, raw_labels, seed, lr=0.01, steps=5000, batch=100, eval_interval=10, val_batch=100):
    """Returns (final train accuracy, final validation accuracy) over the full splits."""
    letters = sorted(set(int(v) for v in raw_labels) | (set(range(26)) - {9, 25}))
    index = {raw: i for i, raw in enumerate(letters)}
    y_all = torch.tensor([index[int(v)] for v in raw_labels], dtype=torch.long)
    x_all = torch.tensor(np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0)
    train, val, _ = oracle_split(len(raw_labels), seed)
    xt, yt = x_all[train], y_all[train]
    xv, yv = x_all[val], y_all[val]

    n_classes = len(letters)
    w = torch.zeros((x_all.shape[1], n_classes), dtype=torch.float64, requires_grad=True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    g = PySplitMix(seed)
    tbuf, vbuf = list(range(len(train))), list(range(len(val)))
    for step in range(1, steps + 1):
        sel = torch.tensor(_draw(g, tbuf, batch))
        loss = F.cross_entropy(xt[sel] @ w + b, yt[sel])
        loss.backward()
        with torch.no_grad():
            w -= lr * w.grad
            b -= lr * b.grad
        w.grad = None
        b.grad = None
        if step % eval_interval == 0:
            _draw(g, vbuf, val_batch)

    with torch.no_grad():
        train_acc = (torch.argmax(xt @ w + b, dim=1) == yt).double().mean().item()
        val_acc = (torch.argmax(xv @ w + b, dim=1) == yv).double().mean().item()
    return train_acc, val_acc
