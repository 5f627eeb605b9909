"""
Integration tests for the emomine command line
Each test drives main() with an argument list and checks exit codes and output
"""

import contextlib
import io
import os
import shutil
import sys
import tempfile
import unittest
from dataclasses import replace

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from corpus import CorpusManifest, read_manifest
from emomine_cli import main
from synthetic import write_demo_movie

REPO_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LINES = ["what a wonderful and beautiful day", "they will kill us all tonight", "the train leaves at noon"]
TARGET_NAMES = {"positive": "happy", "negative": "angry", "neutral": "neutral"}


class TestCli(unittest.TestCase):
    """Subcommands end to end over a synthetic movie"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        shutil.copy(os.path.join(REPO_DIR, "data", "demo_lexicon.tsv"), self.temp_dir)
        write_demo_movie(os.path.join(self.temp_dir, "movies"), "film", LINES, seed=2)
        self.config = self._write_config("config.yaml", "demo_lexicon.tsv")
        self.out_dir = os.path.join(self.temp_dir, "out")

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write_config(self, name: str, lexicon: str) -> str:
        path = os.path.join(self.temp_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(
                f"lexicon: {lexicon}\n"
                "out_dir: out\n"
                "inputs:\n"
                "  - srt: movies/film.srt\n"
                "    wav: movies/film.wav\n"
                "    source_id: film\n"
                "labeling:\n"
                "  neutral_sample_count: 1\n"
                "train:\n"
                "  max_epochs: 2\n"
                "  patience: 1\n"
                "  hidden_size: 4\n"
            )
        return path

    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = main(list(argv))
        return code, stdout.getvalue(), stderr.getvalue()

    def test_build_corpus_prints_counts(self):
        code, out, _ = self.run_cli("build-corpus", "--config", self.config)
        self.assertEqual(code, 0)
        self.assertIn("positive: 1", out)
        self.assertIn("negative: 1", out)
        self.assertIn("neutral: 1", out)
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, "manifest.csv")))
        self.assertEqual(len(os.listdir(os.path.join(self.out_dir, "segments"))), 3)

    def test_rebuild_gives_identical_manifest(self):
        manifest = os.path.join(self.out_dir, "manifest.csv")
        self.assertEqual(self.run_cli("build-corpus", "--config", self.config)[0], 0)
        with open(manifest, "rb") as f:
            first = f.read()
        self.assertEqual(self.run_cli("build-corpus", "--config", self.config)[0], 0)
        with open(manifest, "rb") as f:
            self.assertEqual(f.read(), first)

    def test_missing_lexicon_is_a_config_error(self):
        config = self._write_config("broken.yaml", "no_such_lexicon.tsv")
        code, _, err = self.run_cli("build-corpus", "--config", config)
        self.assertEqual(code, 2)
        self.assertIn("no_such_lexicon.tsv", err)

    def test_unknown_config_key(self):
        code, _, err = self.run_cli("build-corpus", "--config", self.config, "--set", "labeling.bogus=1")
        self.assertEqual(code, 2)
        self.assertIn("bogus", err)

    def test_zero_segments_is_a_data_error(self):
        code, _, _ = self.run_cli("build-corpus", "--config", self.config,
                                  "--set", "labeling.positive_threshold=0.99",
                                  "--set", "labeling.negative_threshold=-0.99",
                                  "--set", "labeling.neutral_sample_count=0")
        self.assertEqual(code, 3)

    def test_featurize_then_cached(self):
        self.run_cli("build-corpus", "--config", self.config)
        code, out, _ = self.run_cli("featurize", "--config", self.config)
        self.assertEqual(code, 0)
        self.assertIn("3 computed, 0 cached", out)
        feats = [n for n in os.listdir(os.path.join(self.out_dir, "segments")) if n.endswith(".feat")]
        self.assertEqual(len(feats), 3)

        code, out, _ = self.run_cli("featurize", "--config", self.config)
        self.assertEqual(code, 0)
        self.assertIn("0 computed, 3 cached", out)

    def test_featurize_lists_unreadable_wav(self):
        self.run_cli("build-corpus", "--config", self.config)
        segments = os.path.join(self.out_dir, "segments")
        wavs = sorted(n for n in os.listdir(segments) if n.endswith(".wav"))
        with open(os.path.join(segments, wavs[0]), "wb") as f:
            f.write(b"garbage, not a RIFF file")

        code, out, err = self.run_cli("featurize", "--config", self.config)
        self.assertEqual(code, 3)
        self.assertIn("2 computed, 0 cached", out)
        self.assertIn(wavs[0], err)
        self.assertFalse(os.path.exists(os.path.join(segments, wavs[0][:-4] + ".feat")))
        for name in wavs[1:]:
            self.assertTrue(os.path.exists(os.path.join(segments, name[:-4] + ".feat")))

    def test_pretrain_then_eval(self):
        self.run_cli("build-corpus", "--config", self.config)
        self.run_cli("featurize", "--config", self.config)
        code, out, _ = self.run_cli("pretrain", "--config", self.config)
        self.assertEqual(code, 0)
        model = os.path.join(self.out_dir, "models", "pretrained.emog")
        self.assertTrue(os.path.exists(model))
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, "reports", "pretrain_0.report.json")))
        self.assertIn(f"model: {model}", out)

        code, out, _ = self.run_cli("eval", "--config", self.config, "--model", model,
                                    "--manifest", os.path.join(self.out_dir, "manifest.csv"))
        self.assertEqual(code, 0)
        lines = out.strip().splitlines()
        self.assertEqual(len(lines), 2)
        self.assertTrue(lines[0].startswith("accuracy: "))
        self.assertTrue(lines[1].startswith("macro_f1: "))

    def test_pretrain_without_features_is_a_data_error(self):
        self.run_cli("build-corpus", "--config", self.config)
        code, _, err = self.run_cli("pretrain", "--config", self.config)
        self.assertEqual(code, 3)
        self.assertIn("featurize", err)

    def test_finetune_needs_pretrained_or_from_scratch(self):
        code, _, err = self.run_cli("finetune", "--config", self.config,
                                    "--target-manifest", os.path.join(self.out_dir, "manifest.csv"))
        self.assertEqual(code, 2)
        self.assertIn("--pretrained", err)

    def test_binary_with_missing_target_manifest(self):
        self.run_cli("build-corpus", "--config", self.config)
        absent = os.path.join(self.temp_dir, "target", "manifest.csv")
        code, _, err = self.run_cli("binary", "--config", self.config, "--negative-class", "angry",
                                    "--target-manifest", absent, "--test-manifest", absent)
        self.assertEqual(code, 2)
        self.assertIn("manifest not found", err)

    def test_featurize_rejects_sample_rate_below_fmax(self):
        self.run_cli("build-corpus", "--config", self.config)
        code, out, err = self.run_cli("featurize", "--config", self.config, "--set", "stft.fmax_hz=10000")
        self.assertEqual(code, 3)
        self.assertIn("0 computed, 0 cached", out)
        self.assertIn("3 WAV files could not be featurized", err)
        self.assertIn("fmax_hz", err)

    def _featurized_corpus(self) -> str:
        """Mined corpus with features, plus a target manifest relabeled to emotions"""
        self.run_cli("build-corpus", "--config", self.config)
        self.run_cli("featurize", "--config", self.config)
        mined = read_manifest(os.path.join(self.out_dir, "manifest.csv"))
        rows = [replace(r, label=TARGET_NAMES[r.label]) for r in mined.rows] * 2
        target = os.path.join(self.out_dir, "target.csv")
        CorpusManifest(rows=rows, root=mined.root).write_csv(target)
        return target

    def test_non_finite_loss_exits_4(self):
        self._featurized_corpus()
        code, _, err = self.run_cli("pretrain", "--config", self.config, "--set", "train.learning_rate=.inf")
        self.assertEqual(code, 4)
        self.assertIn("error: ", err)
        self.assertIn("non-finite", err)
        self.assertFalse(os.path.exists(os.path.join(self.out_dir, "models", "pretrained.emog")))

    def test_finetune_pretrained_model(self):
        target = self._featurized_corpus()
        self.assertEqual(self.run_cli("pretrain", "--config", self.config)[0], 0)
        pretrained = os.path.join(self.out_dir, "models", "pretrained.emog")

        code, out, _ = self.run_cli("finetune", "--config", self.config, "--pretrained", pretrained,
                                    "--target-manifest", target, "--labels", "happy,angry,neutral")
        self.assertEqual(code, 0)
        model = os.path.join(self.out_dir, "models", "finetune.emog")
        self.assertTrue(os.path.exists(model))
        self.assertTrue(os.path.exists(model + ".json"))
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, "reports", "finetune_0.report.json")))
        self.assertIn(f"model: {model}", out)
        self.assertIn("best_epoch: ", out)

        code, out, _ = self.run_cli("eval", "--config", self.config, "--model", model, "--manifest", target)
        self.assertEqual(code, 0)
        self.assertIn("accuracy: ", out)

    def test_finetune_from_scratch(self):
        target = self._featurized_corpus()
        code, out, _ = self.run_cli("finetune", "--config", self.config, "--from-scratch",
                                    "--target-manifest", target)
        self.assertEqual(code, 0)
        model = os.path.join(self.out_dir, "models", "scratch.emog")
        self.assertTrue(os.path.exists(model))
        self.assertTrue(os.path.exists(model + ".json"))
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, "reports", "scratch_0.report.json")))
        self.assertFalse(os.path.exists(os.path.join(self.out_dir, "models", "finetune.emog")))
        self.assertIn(f"model: {model}", out)

    def test_finetune_with_missing_pretrained_model(self):
        target = self._featurized_corpus()
        code, _, err = self.run_cli("finetune", "--config", self.config, "--target-manifest", target,
                                    "--pretrained", os.path.join(self.out_dir, "models", "absent.emog"))
        self.assertEqual(code, 2)
        self.assertIn("pretrained model not found", err)

    def test_binary_reports_both_arms(self):
        target = self._featurized_corpus()
        code, out, _ = self.run_cli("binary", "--config", self.config, "--positive-class", "happy",
                                    "--negative-class", "angry", "--target-manifest", target,
                                    "--test-manifest", target)
        self.assertEqual(code, 0)
        self.assertIn("baseline accuracy: ", out)
        self.assertIn("augmented accuracy: ", out)
        self.assertIn("augmented macro_f1: ", out)
        report = os.path.join(self.out_dir, "reports", "happy_vs_angry_0.report.json")
        self.assertTrue(os.path.exists(report))
        self.assertIn(f"report: {report}", out)

    def test_missing_config(self):
        code, _, _ = self.run_cli("featurize", "--config", os.path.join(self.temp_dir, "absent.yaml"))
        self.assertEqual(code, 2)

    def test_gradcheck_passes_and_is_repeatable(self):
        code, out, _ = self.run_cli("gradcheck", "--seed", "3")
        self.assertEqual(code, 0)
        self.assertEqual(len(out.strip().splitlines()), 14)
        self.assertIn("fw_Uz: ", out)
        self.assertEqual(self.run_cli("gradcheck", "--seed", "3")[1], out)

    def test_gradcheck_names_corrupted_tensor(self):
        code, _, err = self.run_cli("gradcheck", "--corrupt-tensor", "bw_Uh")
        self.assertEqual(code, 1)
        self.assertIn("bw_Uh", err)


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
