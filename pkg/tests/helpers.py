"""Fixture builders shared by several test modules."""

from pathlib import Path

EXCLUSION_WORDS = [
    # story, sentence, word
    ("s1", 0, "The"),
    ("s1", 0, "old"),
    ("s1", 0, "boar"),
    ("s1", 0, "don't"),
    ("s1", 0, "like"),
    ("s1", 0, "rain."),
    ("s1", 1, "It"),
    ("s1", 1, "hides"),
    ("s1", 1, "in"),
    ("s1", 1, "the"),
    ("s1", 1, "woods."),
    ("s2", 0, "Rain"),
    ("s2", 0, "falls"),
    ("s2", 0, "on"),
    ("s2", 0, "the"),
    ("s2", 0, "boar!'"),
    ("s2", 1, "It"),
    ("s2", 1, "sleeps"),
    ("s2", 1, "now"),
]
# single-token words that are not story-final
EXCLUSION_ELIGIBLE = {
    ("s1", i) for i in (0, 1, 2, 4, 6, 7, 8, 9)
} | {("s2", i) for i in (0, 1, 2, 3, 5, 6)}


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_words(path, words=EXCLUSION_WORDS):
    rows, counters = [], {}
    for story, sent, word in words:
        idx = counters.get(story, 0)
        counters[story] = idx + 1
        rows.append((story, sent, idx, word))
    return write_csv(path, ["story_id", "sentence_index", "word_index", "word"], rows)


def write_rts(path, words=EXCLUSION_WORDS, subjects=("a", "b", "c"), base=300.0):
    rows, counters = [], {}
    for story, _, word in words:
        idx = counters.get(story, 0)
        counters[story] = idx + 1
        for j, subj in enumerate(subjects):
            rows.append((subj, story, idx, base + 10 * j + len(word)))
    return write_csv(path, ["subject_id", "story_id", "word_index", "rt_ms"], rows)


ACCEPTANCE_RESULTS = {}


class criterion:
    """Record one acceptance criterion as PASS or FAIL and print the verdict."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {verdict}: {self.title}"
        if self.details:
            line += " [" + "; ".join(self.details) + "]"
        ACCEPTANCE_RESULTS[self.number] = line
        print(line)
        return False
