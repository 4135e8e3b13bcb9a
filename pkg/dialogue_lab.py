#!/usr/bin/env python3
"""Dialogue Lab - pretrain, fine-tune, decode and compare dialogue generation frameworks."""

import argparse
import logging
import signal
import sys
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import RunConfig, build_run_config, load_config
from src.data import (
    SYNTH_TASKS, Vocab, build_vocab, detokenize, encode_history, load_corpus, load_sentences, synth_generate,
    tokenize, write_lines,
)
from src.decode import DecodeParams, calibrate_min_len, generate_responses
from src.layout import Framework, Objective
from src.metrics import avg_len, evaluate, render_table
from src.models import DialogueModel, FinetuneHyper, finetune, pretrain
from src.transformer import ModelConfig
from src.utils import configure_logging

logger = logging.getLogger('dialogue_lab')

# Global flag for shutdown
should_shutdown = threading.Event()


def signal_handler(signum, frame):
    """Handle shutdown signals."""
    logger.info("Shutdown requested...")
    should_shutdown.set()


def _model_config(config: RunConfig, vocab: Vocab) -> ModelConfig:
    values = dict(config.model)
    values.setdefault('vocab_size', max(len(vocab), ModelConfig().vocab_size))
    return ModelConfig.from_dict(values)


def _require(config: RunConfig, *names: str) -> None:
    missing = [name for name in names if getattr(config, name) in (None, '')]
    if missing:
        raise ValueError(f"{config.command} requires --{', --'.join(n.replace('_', '-') for n in missing)}")


def read_responses(path: str) -> Tuple[List[str], Optional[List[str]]]:
    """Responses from a plain one-per-line file or a dialogue corpus (plus last turns for the latter)."""
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line.rstrip('\n') for line in f]
    nonempty = [line for line in lines if line]
    if nonempty and all('\t' in line for line in nonempty):
        samples = load_corpus(path)
        return [s.response for s in samples], [s.last_turn for s in samples]
    return lines, None


def cmd_synth(config: RunConfig) -> None:
    _require(config, 'task', 'out')
    synth_generate(config.task, config.size, config.seed, config.out)


def cmd_vocab(config: RunConfig) -> None:
    _require(config, 'corpus', 'out')
    sentences = [s for path in config.corpus.split(',') for s in load_sentences(path)]
    build_vocab(sentences, config.min_freq).save(config.out)


def cmd_pretrain(config: RunConfig) -> None:
    _require(config, 'objective', 'corpus', 'vocab', 'out')
    vocab = Vocab.load(config.vocab)
    sentences = load_sentences(config.corpus)
    ckpt = pretrain(
        _model_config(config, vocab), sentences, vocab, Objective(config.objective),
        steps=config.steps, seed=config.seed, batch_size=config.batch_size, lr=config.lr,
        warmup_steps=config.warmup_steps, log_every=config.log_every, should_shutdown=should_shutdown.is_set,
    )
    save_checkpoint(ckpt, config.out)


def cmd_finetune(config: RunConfig) -> None:
    _require(config, 'framework', 'corpus', 'vocab', 'out')
    vocab = Vocab.load(config.vocab)
    corpus = load_corpus(config.corpus, vocab)
    init = load_checkpoint(config.init) if config.init else None
    hyper = FinetuneHyper(
        batch_size=config.batch_size, lr=config.lr, warmup_steps=config.warmup_steps, steps=config.steps,
        mask_rate=config.mask_rate, interval=config.interval, fg_coverage=config.fg_coverage,
        force_lineage=config.force_lineage, subset=config.subset, seed=config.seed, log_every=config.log_every,
    )
    ckpt = finetune(
        Framework.parse(config.framework), init, corpus, vocab, hyper,
        config=None if init else _model_config(config, vocab), should_shutdown=should_shutdown.is_set,
    )
    save_checkpoint(ckpt, config.out)


def _load_model(config: RunConfig) -> DialogueModel:
    ckpt = load_checkpoint(config.init)
    return DialogueModel.from_checkpoint(ckpt, config.framework)


def _decode_params(config: RunConfig, model: DialogueModel, vocab: Vocab, min_len: int) -> DecodeParams:
    return DecodeParams(
        framework=model.framework, beam_size=config.beam_size, min_len=min_len,
        max_len=config.max_len, interval=model.interval, exempt_ids=vocab.punctuation_ids,
    )


def _resolve_min_len(config: RunConfig, framework: Framework) -> int:
    if config.min_len is not None:
        return config.min_len
    if config.calibration:
        with open(config.calibration, 'r') as f:
            calibration = yaml.safe_load(f) or {}
        if calibration.get('framework') not in (None, framework.value):
            raise ValueError(f"calibration file {config.calibration} is for {calibration['framework']}")
        logger.info(f"min_len {calibration['min_len']} from {config.calibration}")
        return int(calibration['min_len'])
    return 1


def cmd_calibrate(config: RunConfig) -> None:
    _require(config, 'init', 'corpus', 'vocab', 'out')
    vocab = Vocab.load(config.vocab)
    model = _load_model(config)
    samples = load_corpus(config.corpus, vocab)[:config.subset or None]
    sources = [encode_history(s.history, vocab) for s in samples]
    references = [tokenize(s.response, vocab) for s in samples]
    result = calibrate_min_len(model, sources, references, _decode_params(config, model, vocab, 1),
                               workers=config.workers)
    with open(config.out, 'w') as f:
        yaml.safe_dump({
            'framework': model.framework.value,
            'min_len': result.min_len,
            'target_avg_len': round(result.target_avg_len, 4),
            'avg_len_by_min_len': {k: round(v, 4) for k, v in result.avg_len_by_min_len.items()},
        }, f, sort_keys=False)
    logger.info(f"Calibrated min_len {result.min_len} written to {config.out}")


def cmd_generate(config: RunConfig) -> None:
    _require(config, 'init', 'corpus', 'vocab', 'out')
    vocab = Vocab.load(config.vocab)
    model = _load_model(config)
    samples = load_corpus(config.corpus, vocab)
    params = _decode_params(config, model, vocab, _resolve_min_len(config, model.framework))
    hypotheses = generate_responses(model, [encode_history(s.history, vocab) for s in samples], params,
                                    workers=config.workers)
    unfinished = sum(not hyp.finished for hyp in hypotheses)
    if unfinished:
        logger.warning(f"{unfinished} responses reached max_len without [EOS]")
    responses = [detokenize(hyp.response, vocab) for hyp in hypotheses]
    write_lines(responses, config.out)
    logger.info(f"avgLen {avg_len(responses):.2f}")


def cmd_evaluate(config: RunConfig) -> None:
    _require(config, 'hyp', 'ref')
    hypotheses, _ = read_responses(config.hyp)
    references, last_turns = read_responses(config.ref)
    if config.source:
        last_turns = [s.last_turn for s in load_corpus(config.source)]
    report = evaluate(hypotheses, references, last_turns)
    print(render_table({config.framework or config.hyp: report}))
    print(report.to_key_values())


def cmd_compare(config: RunConfig) -> None:
    _require(config, 'hyp', 'ref')
    references, _ = read_responses(config.ref)
    reports = {}
    for entry in config.hyp.split(','):
        name, _, path = entry.rpartition('=')
        hypotheses, _ = read_responses(path)
        reports[name or path] = evaluate(hypotheses, references)
    print(render_table(reports))


COMMANDS = {
    'synth': cmd_synth,
    'vocab': cmd_vocab,
    'pretrain': cmd_pretrain,
    'finetune': cmd_finetune,
    'calibrate': cmd_calibrate,
    'generate': cmd_generate,
    'evaluate': cmd_evaluate,
    'compare': cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dialogue_lab', description=__doc__)
    parser.add_argument('command', choices=sorted(COMMANDS))
    parser.add_argument('--config', help="YAML run configuration ($DLAB_CONFIG_PATH)")
    parser.add_argument('--framework', choices=[f.value for f in Framework])
    parser.add_argument('--objective', choices=[o.value for o in Objective])
    parser.add_argument('--task', choices=SYNTH_TASKS)
    parser.add_argument('--size', type=int)
    for path_flag in ('corpus', 'vocab', 'init', 'out', 'hyp', 'ref', 'source', 'calibration'):
        parser.add_argument(f'--{path_flag}')
    parser.add_argument('--steps', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--warmup-steps', type=int)
    parser.add_argument('--mask-rate', type=float)
    parser.add_argument('--interval', type=int)
    parser.add_argument('--fg-coverage', type=float)
    parser.add_argument('--subset', type=int)
    parser.add_argument('--force-lineage', action='store_true', default=None)
    parser.add_argument('--log-every', type=int)
    parser.add_argument('--min-freq', type=int)
    parser.add_argument('--beam', dest='beam_size', type=int)
    parser.add_argument('--min-len', type=int)
    parser.add_argument('--max-len', type=int)
    parser.add_argument('--workers', type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        flags: Dict[str, object] = vars(args).copy()
        file_values = load_config(flags.pop('config'))
        config = build_run_config(flags, file_values)
        COMMANDS[config.command](config)
        return 0
    except Exception as e:
        logger.error(f"{args.command} failed: {e}".replace('\n', ' '))
        return 1


if __name__ == "__main__":
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)
    sys.exit(main())
