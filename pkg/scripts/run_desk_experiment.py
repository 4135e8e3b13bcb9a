#!/usr/bin/env python3
"""Desk-scale experiment: pretrain both lineages, fine-tune every framework, compare."""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from src.checkpoint import Checkpoint, save_checkpoint  # noqa: E402
from src.data import (  # noqa: E402
    DialogueSample, build_vocab, detokenize, encode_history, load_corpus, load_sentences, synth_generate, write_lines,
)
from src.decode import DecodeParams, generate_responses  # noqa: E402
from src.layout import Framework, Objective  # noqa: E402
from src.metrics import evaluate, render_table, token_accuracy  # noqa: E402
from src.models import DialogueModel, FinetuneHyper, finetune, pretrain  # noqa: E402
from src.transformer import ModelConfig  # noqa: E402
from src.utils import configure_logging  # noqa: E402

logger = logging.getLogger('run_desk_experiment')


def run_framework(
    framework: Framework,
    init: Optional[Checkpoint],
    train: List[DialogueSample],
    test: List[DialogueSample],
    vocab,
    config: ModelConfig,
    hyper: FinetuneHyper,
    beam_size: int,
) -> Dict[str, object]:
    """Fine-tune one framework and decode the test set; returns responses, accuracy and report."""
    ckpt = finetune(framework, init, train, vocab, hyper, config=None if init else config)
    model = DialogueModel.from_checkpoint(ckpt)
    params = DecodeParams(framework, beam_size=beam_size, min_len=1, max_len=16, interval=hyper.interval,
                          exempt_ids=vocab.punctuation_ids)
    hypotheses = generate_responses(model, [encode_history(s.history, vocab) for s in test], params)
    responses = [detokenize(h.response, vocab) for h in hypotheses]
    references = [s.response for s in test]
    return {
        'checkpoint': ckpt,
        'responses': responses,
        'accuracy': token_accuracy(responses, references),
        'report': evaluate(responses, references, [s.last_turn for s in test]),
    }


def run_experiment(
    out_dir: str,
    frameworks: List[Framework],
    pretrain_steps: int = 2000,
    finetune_steps: int = 2000,
    seed: int = 0,
    subset: Optional[int] = None,
    train_size: int = 2000,
    test_size: int = 100,
    beam_size: int = 4,
    with_random_init: bool = False,
) -> Dict[str, Dict[str, object]]:
    """
    End-to-end run on the reverse task.

    Returns:
        Results keyed by run name ('<framework>' and, with random-init arms, '<framework>/random')
    """
    os.makedirs(out_dir, exist_ok=True)
    lm_path = os.path.join(out_dir, 'lm.txt')
    train_path = os.path.join(out_dir, 'train.txt')
    test_path = os.path.join(out_dir, 'test.txt')
    synth_generate('grammar-lm', 5000, seed, lm_path)
    synth_generate('reverse', train_size, seed, train_path)
    synth_generate('reverse', test_size, seed + 1, test_path)

    sentences = load_sentences(lm_path)
    vocab = build_vocab(sentences + load_sentences(train_path))
    vocab.save(os.path.join(out_dir, 'vocab.txt'))
    config = ModelConfig(vocab_size=max(len(vocab), 64))
    train = load_corpus(train_path, vocab)
    test = load_corpus(test_path, vocab)

    inits: Dict[Objective, Checkpoint] = {}
    for objective in sorted({f.traits.expected_init for f in frameworks}, key=lambda o: o.value):
        ckpt = pretrain(config, sentences, vocab, objective, steps=pretrain_steps, seed=seed)
        save_checkpoint(ckpt, os.path.join(out_dir, f'pretrain-{objective.value}.ckpt'))
        inits[objective] = ckpt

    hyper = FinetuneHyper(steps=finetune_steps, seed=seed, subset=subset)
    results: Dict[str, Dict[str, object]] = {}
    arms = [('', True)] + ([('/random', False)] if with_random_init else [])
    for framework in frameworks:
        for suffix, pretrained in arms:
            name = framework.value + suffix
            init = inits[framework.traits.expected_init] if pretrained else None
            result = run_framework(framework, init, train, test, vocab, config, hyper, beam_size)
            write_lines(result['responses'], os.path.join(out_dir, f'{name.replace("/", "-")}.hyp'))
            logger.info(f"{name}: token accuracy {result['accuracy']:.3f}")
            results[name] = result
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument('--out-dir', default='desk_run')
    parser.add_argument('--frameworks', default=','.join(f.value for f in Framework))
    parser.add_argument('--pretrain-steps', type=int, default=2000)
    parser.add_argument('--finetune-steps', type=int, default=2000)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--subset', type=int)
    parser.add_argument('--random-init', action='store_true', help="also fine-tune every framework from scratch")
    args = parser.parse_args()

    configure_logging()
    try:
        results = run_experiment(
            args.out_dir, [Framework.parse(f) for f in args.frameworks.split(',')],
            args.pretrain_steps, args.finetune_steps, args.seed, args.subset,
            with_random_init=args.random_init,
        )
    except Exception as e:
        logger.error(f"Experiment failed: {e}")
        return 1
    print(render_table({name: r['report'] for name, r in results.items()}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
