import numpy as np
import pytest

SYLLABLES = {
    "alpha": ("ka", "ro", "mi", "ta", "lu", "ne", "so", "pi"),
    "beta": ("zeph", "wort", "glim", "brax", "quol", "fent", "drus", "molv"),
}


def pseudo_corpus(language: str, n_words: int, seed: int) -> str:
    """Deterministic nonsense corpus with a language-specific inventory."""
    rng = np.random.Generator(np.random.PCG64(seed))
    syl = SYLLABLES[language]
    words = ["".join(rng.choice(syl, size=int(rng.integers(1, 4))))
             for _ in range(n_words)]
    return " ".join(words)


@pytest.fixture
def corpus_files(tmp_path):
    def make(n_words=1500):
        paths = {}
        for i, language in enumerate(("alpha", "beta")):
            path = tmp_path / f"{language}.txt"
            path.write_text(pseudo_corpus(language, n_words, seed=10 + i),
                            encoding="utf-8")
            paths[language] = str(path)
        return paths
    return make
