"""Desk-scale toy MoE language model for end-to-end capture tests.

The model is deliberately token-wise: embedding followed by a stack of
blocks with no cross-token mixing. Routing decisions are still made per
token per MoE layer by a learned gate, which is all the capture shim needs;
the absence of mixing makes masked-token injection tests exact (adding
special tokens cannot perturb content-token hidden states).
"""

from __future__ import annotations

import torch
from torch import nn

MAX_TOY_EXPERTS = 32
MAX_TOY_LAYERS = 8

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
TOY_VOCAB = 256
TOY_SPECIAL_IDS = (PAD_ID, BOS_ID, EOS_ID)

# Gate locator patterns for common layouts. Non-routing blocks simply have
# no module matching the pattern and are skipped.
TOY_GATE_PATTERN = r"blocks\.(\d+)\.gate"
QWEN_STYLE_GATE_PATTERN = r"model\.layers\.(\d+)\.mlp\.gate"
HYBRID_STYLE_GATE_PATTERN = r"backbone\.layers\.(\d+)\.mixer\.gate"


class _Expert(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.down(torch.tanh(self.up(x)))


class MoEBlock(nn.Module):
    """Top-k routed feed-forward block with a linear gate."""

    def __init__(self, dim: int, num_experts: int, top_k: int, hidden: int):
        super().__init__()
        self.num_experts = num_experts
        self.top_k = top_k
        self.norm = nn.LayerNorm(dim)
        self.gate = nn.Linear(dim, num_experts, bias=False)
        self.experts = nn.ModuleList(_Expert(dim, hidden) for _ in range(num_experts))

    def forward(self, h):
        x = self.norm(h)
        logits = self.gate(x)                       # (..., N)
        probs = torch.softmax(logits, dim=-1)
        weights, idx = torch.topk(probs, self.top_k, dim=-1)
        weights = weights / weights.sum(dim=-1, keepdim=True)
        out = torch.zeros_like(x)
        for slot in range(self.top_k):
            sel = idx[..., slot]
            w = weights[..., slot].unsqueeze(-1)
            for e in range(self.num_experts):
                mask = sel == e
                if mask.any():
                    out[mask] = out[mask] + w[mask] * self.experts[e](x[mask])
        return h + out


class DenseBlock(nn.Module):
    """Non-routing filler block for hybrid layouts (no gate to hook)."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.ff = _Expert(dim, hidden)

    def forward(self, h):
        return h + self.ff(self.norm(h))


class ToyMoEModel(nn.Module):
    """Embedding plus a stack of (optionally interleaved) blocks."""

    def __init__(self, num_layers: int, num_experts: int, top_k: int,
                 dim: int = 32, hidden: int = 48, vocab: int = TOY_VOCAB,
                 hybrid: bool = False):
        super().__init__()
        self.num_experts = num_experts
        self.top_k = top_k
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, dim)
        blocks = []
        for _ in range(num_layers):
            if hybrid:
                blocks.append(DenseBlock(dim, hidden))
            blocks.append(MoEBlock(dim, num_experts, top_k, hidden))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, token_ids):
        h = self.embed(token_ids)
        for block in self.blocks:
            h = block(h)
        return h


def make_toy_model(num_layers: int, num_experts: int, top_k: int, seed: int,
                   hybrid: bool = False) -> ToyMoEModel:
    """Build a seeded toy MoE and verify its routing is non-degenerate."""
    if not (1 <= num_experts <= MAX_TOY_EXPERTS):
        raise ValueError(f"num_experts must be in [1, {MAX_TOY_EXPERTS}]")
    if not (1 <= num_layers <= MAX_TOY_LAYERS):
        raise ValueError(f"num_layers must be in [1, {MAX_TOY_LAYERS}]")
    if not (1 <= top_k <= num_experts):
        raise ValueError("top_k must be in [1, num_experts]")
    torch.manual_seed(seed)
    model = ToyMoEModel(num_layers, num_experts, top_k, hybrid=hybrid)
    model.eval()
    _assert_nondegenerate(model, seed)
    return model


def _assert_nondegenerate(model: ToyMoEModel, seed: int, tokens: int = 512):
    """No expert may take more than half of uniform-random tokens at init."""
    gen = torch.Generator().manual_seed(seed + 1)
    ids = torch.randint(4, model.vocab, (1, tokens), generator=gen)
    rates = {}

    def probe(name):
        def hook(module, args, output):
            probs = torch.softmax(output, dim=-1)
            _, idx = torch.topk(probs, model.top_k, dim=-1)
            counts = torch.bincount(idx.reshape(-1), minlength=model.num_experts)
            rates[name] = counts.float() / (tokens * model.top_k)
        return hook

    handles = [m.register_forward_hook(probe(n))
               for n, m in model.named_modules() if n.endswith(".gate")]
    try:
        with torch.no_grad():
            model(ids)
    finally:
        for h in handles:
            h.remove()
    for name, r in rates.items():
        worst = float(r.max())
        if worst > 0.5:
            raise RuntimeError(
                f"degenerate init: expert share {worst:.2f} > 0.5 at '{name}' "
                f"(seed {seed}); pick another seed")
