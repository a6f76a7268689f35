"""Caption vocabulary and tokenizer shared by the scene generator and the embedder."""

from __future__ import annotations

import re

CLASS_NAMES = ("person", "vehicle", "tree", "building", "lamp")
PLURALS = {name: name + "s" for name in CLASS_NAMES}
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")
# ambient level bins: [0, .25) night, [.25, .5) dusk, [.5, .75) morning, [.75, 1] noon
AMBIENT_WORDS = ("night", "dusk", "morning", "noon")

INFRARED_PREFIX = "an infrared image"
VISIBLE_PREFIX = "a visible image"

PAD, UNK, NULL = "<pad>", "<unk>", "<null>"
SPECIALS = (PAD, UNK, NULL)

_TEMPLATE_WORDS = ("a", "an", "infrared", "visible", "image", "of", "and", "at", "with",
                   "empty", "scene", "photo", "thermal")


def _build_vocab() -> tuple[str, ...]:
    words: list[str] = list(SPECIALS)
    for group in (_TEMPLATE_WORDS, NUMBER_WORDS, CLASS_NAMES, tuple(PLURALS.values()), AMBIENT_WORDS):
        for w in group:
            if w not in words:
                words.append(w)
    return tuple(words)


VOCAB = _build_vocab()
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, UNK_ID, NULL_ID = (TOKEN_IDS[s] for s in SPECIALS)

_PUNCT = re.compile(r"[,.;:!?]")


def tokenize(caption: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", caption.lower()).split()


def encode_tokens(caption: str | None, max_len: int) -> list[int]:
    """Token ids padded to ``max_len``; ``None`` maps to the reserved null sequence."""
    if caption is None:
        return [NULL_ID] * max_len
    ids = [TOKEN_IDS.get(w, UNK_ID) for w in tokenize(caption)][:max_len]
    return ids + [PAD_ID] * (max_len - len(ids))
