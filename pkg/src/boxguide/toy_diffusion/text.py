from __future__ import annotations

import torch
from torch import nn

from ..prompt_parser import EntityLexicon, WordTokenizer

PAD, UNK = "[pad]", "[unk]"
FUNCTION_WORDS = ("and", ",", ".", "with", "next", "to", "of", "on", "in", "is", "are", "sitting",
                  "each", "other", "it", "it's", "'s", "around", "center", "pole", "back", "sides",
                  "over", "under", "near", "behind", "left", "right", "top", "bottom")


def build_vocab(lexicon: EntityLexicon | None = None) -> list[str]:
    lexicon = lexicon or EntityLexicon.default()
    words = sorted(set(lexicon.vocabulary()) | set(FUNCTION_WORDS))
    return [PAD, UNK] + words


class TextEncoder(nn.Module):
    """Bag-of-words encoder: one learned 64-d vector per vocabulary word.

    Sequences are padded to ``max_len`` with the pad embedding, which doubles as
    the unconditional (empty prompt) context.
    """

    def __init__(self, vocab: list[str], dim: int = 64, max_len: int = 16):
        super().__init__()
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.max_len = max_len
        self.tokenizer = WordTokenizer()
        self.embedding = nn.Embedding(len(self.vocab), dim)
        nn.init.normal_(self.embedding.weight, std=1.0)

    def token_ids(self, prompt: str) -> list[int]:
        ids = [self.index.get(tok, self.index[UNK]) for tok in self.tokenizer.tokens(prompt)]
        if len(ids) > self.max_len:
            raise ValueError(f"prompt has {len(ids)} tokens, max is {self.max_len}")
        return ids

    def batch_ids(self, prompts: list[str]) -> torch.Tensor:
        out = torch.zeros(len(prompts), self.max_len, dtype=torch.long)
        for b, p in enumerate(prompts):
            ids = self.token_ids(p) if p else []
            out[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        return out

    def forward(self, prompts: list[str]) -> torch.Tensor:
        """(B, max_len, dim) context for cross-attention."""
        return self.embedding(self.batch_ids(prompts).to(self.embedding.weight.device))

    def encode_phrase(self, phrase: str) -> torch.Tensor:
        """Mean of the phrase's token embeddings, shape (dim,)."""
        ids = torch.tensor(self.token_ids(phrase), dtype=torch.long, device=self.embedding.weight.device)
        return self.embedding(ids).mean(0)
