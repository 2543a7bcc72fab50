import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multigran.core import Annotation, BinaryMask, LabeledImage
from multigran.curation import (DEFAULT_BANNED, RESPONSE_SUFFIX, SENTENCE_TASK, SUMMARY_TOKEN, WORD_TASK,
                                CaptionRecord, CurationError, MockCaptioner, SchemaError, SftSample,
                                build_sentence_sample, build_word_sample, caption_rejection, char_entropy, curate,
                                format_response, read_sft, refine_captions, request_captions, sample_from_json,
                                sample_to_json, shuffle_and_sample, write_sft)
from multigran.synth import SynthSpec, synth_generate

GOLDEN = Path(__file__).parent / "golden"
FRUIT = ["apple", "banana", "orange"]


def fruit_image(labels=(0, 1, 2), captions=("a bowl with three kinds of fresh fruit",)):
    anns = []
    for i, lab in enumerate(labels):
        m = np.zeros((8, 8), bool)
        m[i:i + 2, i:i + 2] = True
        anns.append(Annotation.from_mask(lab, BinaryMask(m)))
    return LabeledImage(np.zeros((8, 8, 3), np.uint8), tuple(anns), captions=captions, image_id="fruit")


@pytest.fixture(scope="module")
def synth():
    return synth_generate(SynthSpec(num_images=4, seed=0))


class TestTemplates:
    def test_response_byte_exact(self):
        assert format_response("a red square on grass") == "a red square on grass. The perception result is <PER>"
        assert format_response("ends with a period.") == "ends with a period. The perception result is <PER>"
        assert format_response(None) == "The perception result is <PER>"

    def test_task_strings(self):
        assert WORD_TASK.startswith("Please identify all objects according to the given phrase list.")
        assert SENTENCE_TASK == "Please identify the target according to the following instruction."

    def test_exactly_one_summary_token(self):
        with pytest.raises(CurationError):
            SftSample("word_based", WORD_TASK, "a", "no marker", "x")
        with pytest.raises(CurationError):
            SftSample("word_based", WORD_TASK, "a", f"{SUMMARY_TOKEN} {SUMMARY_TOKEN}", "x")


class TestWordSample:
    def test_positives_no_negatives(self):
        s = build_word_sample(fruit_image(), FRUIT, rng_seed=0)
        assert sorted(s.instruction.split(", ")) == sorted(FRUIT)
        assert s.task_description == WORD_TASK
        assert s.response == "a bowl with three kinds of fresh fruit. " + RESPONSE_SUFFIX

    def test_single_positive(self):
        s = build_word_sample(fruit_image(labels=(0,)), ["banana"], rng_seed=3)
        assert s.instruction == "banana"

    def test_seed7_golden(self):
        g = json.loads((GOLDEN / "sampler_seed7.json").read_text())
        out = shuffle_and_sample(g["positives"], g["pool"], g["budget"], g["seed"])
        assert out == g["labels"]
        assert len(out) == 6 and set(g["positives"]) <= set(out)

    def test_empty_vocab(self):
        with pytest.raises(CurationError):
            build_word_sample(fruit_image(), [], rng_seed=0)

    def test_no_caption_skipped(self):
        from multigran.curation import SampleSkipped
        with pytest.raises(SampleSkipped):
            build_word_sample(fruit_image(captions=()), FRUIT, rng_seed=0)

    def test_label_sets(self):
        vocab = FRUIT + ["pear", "plum", "kiwi", "lime"]
        for seed in range(50):
            s = build_word_sample(fruit_image(), vocab, rng_seed=seed, neg_budget=5)
            labels = s.instruction.split(", ")
            assert set(s.positive_labels) <= set(labels)
            assert set(labels) - set(s.positive_labels) <= set(vocab) - set(FRUIT)
            assert len(labels) == 5


class TestSentenceSample:
    def test_verbatim(self, synth):
        img = synth.images[0]
        s = build_sentence_sample(img.__class__(img.image, img.annotations, ("a b c d e f",), img.image_id),
                                  "the red apple", img.annotations[0], rng_seed=0)
        assert s.instruction == "the red apple"
        assert s.response == "a b c d e f. The perception result is <PER>"

    def test_trim_only_outer_whitespace(self):
        img = fruit_image()
        s = build_sentence_sample(img, "  the  red   apple \n", img.annotations[0], rng_seed=0)
        assert s.instruction == "the  red   apple"

    def test_empty_expression(self):
        img = fruit_image()
        with pytest.raises(CurationError):
            build_sentence_sample(img, "   ", img.annotations[0], rng_seed=0)


class TestCaptions:
    def test_mock_passthrough(self):
        rec = request_captions("img", MockCaptioner("m"))
        assert rec.captions == (("m", "a toy scene with two squares"),)

    def test_timeout_degrades(self, caplog):
        class Slow:
            source_id = "slow"

            def caption(self, ref, image=None):
                raise TimeoutError("timed out after 0.01s")

        srcs = [MockCaptioner(f"m{i}", f"caption number {i} for the image") for i in range(3)] + [Slow()]
        rec = request_captions("img", srcs)
        assert len(rec.captions) == 3
        assert rec.failures and rec.failures[0][0] == "slow"
        assert "slow failed" in caplog.text

    def test_all_fail(self):
        class Bad:
            source_id = "bad"

            def caption(self, ref, image=None):
                raise ConnectionError("refused")

        rec = request_captions("img", [Bad(), Bad()])
        assert rec.empty and len(rec.failures) == 2

    def test_duplicates_dropped(self):
        rec = request_captions("img", [MockCaptioner("a", "same words"), MockCaptioner("b", "same words")])
        assert [t for _, t in rec.captions] == ["same words"]

    def test_at_most_four(self):
        rec = request_captions("img", [MockCaptioner(f"s{i}", f"caption {i}") for i in range(6)])
        assert len(rec.captions) == 4


class TestRefinement:
    def test_banned_rejected(self):
        assert caption_rejection("This might be a cat") == "banned:might"

    def test_zero_entropy(self):
        assert char_entropy("aaaaaaaaaa") == 0.0
        assert caption_rejection("aaaaaaaaaa") == "entropy"

    def test_first_banned_hit_recorded(self):
        assert caption_rejection("A dog may imply ownership") == "banned:may"

    def test_whole_word_case_insensitive(self):
        assert caption_rejection("MAYBE a mayor stands in the town square today") is None
        assert caption_rejection("It MAY rain over the little green town today") == "banned:may"

    def test_length_bounds(self):
        assert caption_rejection("quick brown fox jumps") == "length"
        assert caption_rejection(" ".join(["quick brown fox jumps over the lazy dog"] * 20)) == "length"

    def test_entropy_of_uniform_letters(self):
        assert char_entropy("abcd") == pytest.approx(2.0)

    def test_all_banned_words_filtered(self):
        for w in DEFAULT_BANNED:
            assert caption_rejection(f"the picture {w} show a cat on a mat") == f"banned:{w}"

    @settings(max_examples=100)
    @given(st.lists(st.text(alphabet="abcdefgh mayightndicte", min_size=0, max_size=60), max_size=5))
    def test_idempotent(self, texts):
        rec = CaptionRecord("x", tuple(("s", t) for t in texts))
        once = refine_captions(rec)
        assert refine_captions(once) == once
        assert all(caption_rejection(t) is None for t in once.accepted_texts)


class TestShuffle:
    def test_permutation_when_budget_equals_positives(self):
        out = shuffle_and_sample(FRUIT, [], 3, 1)
        assert sorted(out) == sorted(FRUIT)

    def test_budget_too_small(self):
        with pytest.raises(CurationError):
            shuffle_and_sample(FRUIT, ["pear"], 2, 0)

    def test_order_not_constant(self):
        orders = {tuple(shuffle_and_sample(FRUIT + ["kiwi"], [], 4, s)) for s in range(200)}
        assert len(orders) > 1

    def test_negative_frequencies(self):
        pool = [f"n{i}" for i in range(10)]
        counts = Counter()
        n = 10_000
        rng = np.random.default_rng(0)
        for _ in range(n):
            counts.update(l for l in shuffle_and_sample(FRUIT, pool, 6, rng) if l.startswith("n"))
        for neg in pool:
            assert abs(counts[neg] / n - 3 / 10) <= 0.03

    def test_multiset_seed_independent_given_negatives(self):
        a = shuffle_and_sample(FRUIT, ["x", "y"], 5, 1)
        b = shuffle_and_sample(FRUIT, ["x", "y"], 5, 2)
        assert sorted(a) == sorted(b)

    def test_char_cap(self):
        pool = ["z" * 50 + str(i) for i in range(20)]
        out = shuffle_and_sample(["a"], pool, 21, 0, char_cap=200)
        assert len(", ".join(out)) <= 200 and "a" in out


class TestJsonl:
    def samples(self, synth, n=100):
        from multigran.harness.data import caption_dataset
        images = caption_dataset(synth)
        out = []
        seed = 0
        while len(out) < n:
            out += curate(images, synth.categories, [(p.image_index, p.expression, p.annotation_index)
                                                     for p in synth.referring], seed=seed, neg_budget=4)
            seed += 1
        return out[:n]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        assert write_sft(p, []) == 0
        assert p.read_text() == "" and list(read_sft(p)) == []

    def test_round_trip(self, synth, tmp_path):
        samples = self.samples(synth)
        p = tmp_path / "d.jsonl"
        write_sft(p, samples)
        back = list(read_sft(p))
        assert back == samples
        q = tmp_path / "d2.jsonl"
        write_sft(q, back)
        assert p.read_bytes() == q.read_bytes()

    def test_missing_response(self, synth, tmp_path):
        d = sample_to_json(self.samples(synth, 1)[0])
        del d["response"]
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(sample_to_json(self.samples(synth, 1)[0])) + "\n" + json.dumps(d) + "\n")
        with pytest.raises(SchemaError) as err:
            list(read_sft(p))
        assert err.value.line == 2 and err.value.field == "response"

    def test_golden_sample_file(self):
        lines = (GOLDEN / "sft_sample.jsonl").read_text().splitlines()
        back = [sample_from_json(json.loads(l)) for l in lines]
        assert [json.dumps(sample_to_json(s), ensure_ascii=False) for s in back] == lines
        assert {s.task_kind for s in back} == {"word_based", "sentence_based"}
