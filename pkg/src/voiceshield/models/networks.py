"""Fixed toy architectures.

All networks take normalised frontend features ``[batch, frames, feat]`` and an
optional boolean frame mask ``[batch, frames]`` (True = valid). Masked frames
are zeroed after each convolution so a padded batch computes exactly what the
unpadded utterances would.

Layer sizes (feat = 40 for log-mel, 13 for MFCC; d = embedding dim):

conv       Conv1d(feat,64,5) GELU Conv1d(64,64,3) GELU | mean-pool | Linear(64,d)
recurrent  Conv1d(feat,64,4,stride=2) GELU GRU(64,64)   | mean-pool | Linear(64,d)
tdnn       Conv1d(feat,64,5) GELU Conv1d(64,64,3,dil=2) GELU Conv1d(64,64,3,dil=3) GELU
           | mean+std pool | Linear(128,d)
asr        Conv1d(40,128,5) GELU Conv1d(128,128,5) GELU Conv1d(128,128,3) GELU Linear(128,n_symbols)
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


def _conv(cin, cout, k, dilation=1):
    return nn.Conv1d(cin, cout, k, padding=dilation * (k // 2), dilation=dilation)


def _apply_mask(h, mask):
    # h: [B, C, T]
    if mask is None:
        return h
    return h * mask[:, None, :].to(h.dtype)


def _masked_mean(h, mask):
    # h: [B, T, C]
    if mask is None:
        return h.mean(dim=1)
    m = mask[:, :, None].to(h.dtype)
    return (h * m).sum(dim=1) / m.sum(dim=1)


def _halve(mask):
    # frame mask after the stride-2, kernel-4, padding-1 convolution
    if mask is None:
        return None
    lengths = mask.sum(dim=1) // 2
    return torch.arange(mask.shape[1] // 2)[None, :] < lengths[:, None]


def _run_gru(gru, h, mask):
    if mask is None:
        out, _ = gru(h)
        return out
    lengths = mask.sum(dim=1).cpu()
    packed = pack_padded_sequence(h, lengths, batch_first=True, enforce_sorted=False)
    out, _ = gru(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=h.shape[1])
    return out


class ConvPool(nn.Module):
    def __init__(self, n_feat, dim):
        super().__init__()
        self.c1 = _conv(n_feat, 64, 5)
        self.c2 = _conv(64, 64, 3)
        self.proj = nn.Linear(64, dim)

    def forward(self, feats, mask=None):
        h = feats.transpose(1, 2)
        h = _apply_mask(nn.functional.gelu(self.c1(h)), mask)
        h = _apply_mask(nn.functional.gelu(self.c2(h)), mask)
        return self.proj(_masked_mean(h.transpose(1, 2), mask))


class RecurrentPool(nn.Module):
    def __init__(self, n_feat, dim):
        super().__init__()
        self.c1 = nn.Conv1d(n_feat, 64, 4, stride=2, padding=1)
        self.gru = nn.GRU(64, 64, batch_first=True)
        self.proj = nn.Linear(64, dim)

    def forward(self, feats, mask=None):
        mask = _halve(mask)
        h = _apply_mask(nn.functional.gelu(self.c1(feats.transpose(1, 2))), mask)
        h = _run_gru(self.gru, h.transpose(1, 2), mask)
        return self.proj(_masked_mean(h, mask))


class Tdnn(nn.Module):
    def __init__(self, n_feat, dim):
        super().__init__()
        self.c1 = _conv(n_feat, 64, 5)
        self.c2 = _conv(64, 64, 3, dilation=2)
        self.c3 = _conv(64, 64, 3, dilation=3)
        self.proj = nn.Linear(128, dim)

    def forward(self, feats, mask=None):
        h = feats.transpose(1, 2)
        for conv in (self.c1, self.c2, self.c3):
            h = _apply_mask(nn.functional.gelu(conv(h)), mask)
        h = h.transpose(1, 2)
        mean = _masked_mean(h, mask)
        var = _masked_mean((h - mean[:, None, :]) ** 2, mask)
        return self.proj(torch.cat([mean, torch.sqrt(var + 1e-8)], dim=1))


class CtcNet(nn.Module):
    def __init__(self, n_feat, n_symbols):
        super().__init__()
        self.c1 = _conv(n_feat, 128, 5)
        self.c2 = _conv(128, 128, 5)
        self.c3 = _conv(128, 128, 3)
        self.out = nn.Linear(128, n_symbols)

    def forward(self, feats, mask=None):
        h = feats.transpose(1, 2)
        for conv in (self.c1, self.c2, self.c3):
            h = _apply_mask(nn.functional.gelu(conv(h)), mask)
        return torch.log_softmax(self.out(h.transpose(1, 2)), dim=-1)


ENCODER_ARCHS = {"conv": ConvPool, "recurrent": RecurrentPool, "tdnn": Tdnn}
