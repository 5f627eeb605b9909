"""
Unit tests for the SubRip parser
Golden files, malformed input, cue filters and a byte-level fuzz run
"""

import logging
import os
import random
import sys
import unittest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from srt_parser import (
    CueFilterPolicy,
    EmptyFile,
    NotUtf8,
    SubtitleCue,
    filter_cues,
    format_timestamp,
    parse_srt,
    parse_srt_with_warnings,
    serialize_srt,
    word_count,
)

GOLDEN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")


def golden(name: str) -> bytes:
    with open(os.path.join(GOLDEN_DIR, name), "rb") as f:
        return f.read()


def cue(text: str, index: int = 1) -> SubtitleCue:
    return SubtitleCue(index=index, start_ms=0, end_ms=1000, text=text)


class TestParseSrt(unittest.TestCase):
    """parse_srt over literal blocks and golden files"""

    def test_single_block(self):
        cues = parse_srt(b"1\n00:00:01,000 --> 00:00:02,500\nHello there my friend\n\n")
        self.assertEqual(cues, [SubtitleCue(1, 1000, 2500, "Hello there my friend")])

    def test_tags_stripped_and_lines_joined(self):
        cues = parse_srt(b"1\n00:00:01,000 --> 00:00:02,000\n<i>Never</i> again,\nI swear\n")
        self.assertEqual(cues[0].text, "Never again, I swear")

    def test_end_before_start_is_dropped_with_warning(self):
        raw = (b"1\n00:00:01,000 --> 00:00:02,000\nfirst\n\n"
               b"2\n00:00:05,000 --> 00:00:04,000\nsecond\n\n"
               b"3\n00:00:06,000 --> 00:00:07,000\nthird\n")
        cues, warnings = parse_srt_with_warnings(raw, "three.srt")
        self.assertEqual([c.index for c in cues], [1, 3])
        self.assertEqual(len(warnings), 1)
        self.assertEqual(warnings[0].block, 2)
        self.assertEqual(warnings[0].source, "three.srt")

    def test_golden_well_formed(self):
        cues = parse_srt(golden("well_formed.srt"))
        self.assertEqual(cues, [
            SubtitleCue(1, 1000, 2500, "Hello there my friend"),
            SubtitleCue(2, 3000, 5250, "I never thought I would see you again"),
            SubtitleCue(3, 3723004, 3724000, "Goodbye"),
        ])

    def test_golden_bom_and_crlf(self):
        cues = parse_srt(golden("bom_crlf.srt"))
        self.assertEqual([c.text for c in cues], ["Windows line endings here", "and a byte order mark"])
        self.assertEqual(cues[0].index, 1)
        for c in cues:
            self.assertNotIn("\r", c.text)

    def test_golden_tags(self):
        cues = parse_srt(golden("tags.srt"))
        self.assertEqual([c.text for c in cues], ["Never again, I swear", "Red alert now"])

    def test_golden_out_of_order_kept_in_file_order(self):
        cues = parse_srt(golden("out_of_order.srt"))
        self.assertEqual([c.start_ms for c in cues], [10000, 1000, 2000])

    def test_golden_malformed_blocks_are_skipped(self):
        cues, warnings = parse_srt_with_warnings(golden("malformed.srt"), "malformed.srt")
        self.assertEqual([c.text for c in cues], ["First good cue", "Last good cue"])
        self.assertEqual([w.block for w in warnings], [2, 3, 4, 5])
        self.assertIn("not after start", warnings[0].reason)
        self.assertEqual(warnings[0].to_dict()["source"], "malformed.srt")

    def test_dot_separator_and_short_millis(self):
        cues = parse_srt(b"1\n00:00:01.5 --> 00:00:02,25\nshort millis here\n")
        self.assertEqual((cues[0].start_ms, cues[0].end_ms), (1500, 2250))

    def test_not_utf8(self):
        with self.assertRaises(NotUtf8):
            parse_srt(b"1\n00:00:01,000 --> 00:00:02,000\n\xff\xfe bad\n")

    def test_empty_file(self):
        for raw in (b"", b"\n\n\n", b"no subtitles in here"):
            with self.assertRaises(EmptyFile):
                parse_srt(raw)

    def test_round_trip(self):
        for name in ("well_formed.srt", "bom_crlf.srt", "tags.srt", "out_of_order.srt"):
            cues = parse_srt(golden(name))
            self.assertEqual(parse_srt(serialize_srt(cues)), cues, name)

    def test_format_timestamp(self):
        self.assertEqual(format_timestamp(3723004), "01:02:03,004")
        self.assertEqual(format_timestamp(0), "00:00:00,000")


class TestParseSrtFuzz(unittest.TestCase):
    """Arbitrary bytes either parse or raise one of the two documented errors"""

    def setUp(self):
        logging.disable(logging.WARNING)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def _mutate(self, rng: random.Random, raw: bytes) -> bytes:
        data = bytearray(raw)
        for _ in range(rng.randint(1, 8)):
            choice = rng.random()
            pos = rng.randrange(len(data) + 1)
            if choice < 0.4 and data:
                data[min(pos, len(data) - 1)] = rng.randrange(256)
            elif choice < 0.7:
                data[pos:pos] = bytes(rng.randrange(256) for _ in range(rng.randint(1, 4)))
            elif data:
                del data[pos: pos + rng.randint(1, 6)]
        return bytes(data)

    def test_fuzz_never_crashes(self):
        rng = random.Random(1234)
        seeds = [golden(name) for name in sorted(os.listdir(GOLDEN_DIR))]
        alphabet = b"0123456789:,.-> \n\r\t<>/iabcxyz"
        for trial in range(10000):
            kind = trial % 3
            if kind == 0:
                raw = bytes(rng.randrange(256) for _ in range(rng.randint(0, 200)))
            elif kind == 1:
                raw = bytes(rng.choice(alphabet) for _ in range(rng.randint(0, 200)))
            else:
                raw = self._mutate(rng, rng.choice(seeds))
            try:
                cues, _ = parse_srt_with_warnings(raw)
            except (NotUtf8, EmptyFile):
                continue
            for c in cues:
                self.assertGreater(c.end_ms, c.start_ms)
                self.assertGreaterEqual(c.index, 1)
                self.assertTrue(c.text)
                self.assertEqual(c.text, c.text.strip())
                self.assertNotIn("  ", c.text)


class TestFilterCues(unittest.TestCase):
    """Length and word-count filters"""

    def setUp(self):
        self.policy = CueFilterPolicy()

    def test_defaults(self):
        self.assertEqual((self.policy.max_chars, self.policy.min_words), (100, 4))

    def test_too_long_removed(self):
        text = " ".join(["word"] * 19) + " abcdef"
        self.assertEqual(len(text), 101)
        self.assertEqual(word_count(text), 20)
        self.assertEqual(filter_cues([cue(text)], self.policy), [])

    def test_hundred_chars_kept(self):
        text = " ".join(["word"] * 19) + " abcde"
        self.assertEqual(len(text), 100)
        self.assertEqual(len(filter_cues([cue(text)], self.policy)), 1)

    def test_three_words_removed(self):
        self.assertEqual(filter_cues([cue("yes yes yes")], self.policy), [])

    def test_four_words_kept(self):
        self.assertEqual(filter_cues([cue("this is four words")], self.policy), [cue("this is four words")])

    def test_predicate_and_order_on_random_texts(self):
        rng = random.Random(7)
        words = ["a", "no", "yes", "maybe", "absolutely", "x" * 30]
        cues = [cue(" ".join(rng.choice(words) for _ in range(rng.randint(1, 12))), i + 1) for i in range(500)]
        policy = CueFilterPolicy(max_chars=60, min_words=3)
        kept = filter_cues(cues, policy)
        expected = [c for c in cues if len(c.text) <= 60 and len(c.text.split(" ")) >= 3]
        self.assertEqual(kept, expected)

    def test_policy_rejects_zero(self):
        with self.assertRaises(ValueError):
            CueFilterPolicy(max_chars=0)
        with self.assertRaises(ValueError):
            CueFilterPolicy(min_words=0)


def run_tests():
    """Run all tests"""
    loader = unittest.TestLoader()
    suite = loader.loadTestsFromModule(sys.modules[__name__])
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    success = run_tests()
    sys.exit(0 if success else 1)
