import pytest
import yaml

import dialogue_lab
from dialogue_lab import main, read_responses
from src.checkpoint import load_checkpoint


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(dialogue_lab, 'configure_logging', lambda: None)


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / 'run.yaml'
    config.write_text(yaml.safe_dump({
        'model': {'n_layers': 1, 'n_heads': 2, 'hidden_size': 16},
        'training': {'batch_size': 4, 'warmup_steps': 1, 'log_every': 1},
        'decoding': {'beam_size': 2, 'max_len': 6},
    }), encoding='utf-8')
    corpus = tmp_path / 'reverse.txt'
    vocab = tmp_path / 'vocab.txt'
    assert main(['synth', '--task', 'reverse', '--size', '10', '--seed', '1', '--out', str(corpus)]) == 0
    assert main(['vocab', '--corpus', str(corpus), '--out', str(vocab)]) == 0
    return tmp_path


def _paths(workspace, *names):
    return [str(workspace / name) for name in names]


def test_synth_writes_requested_lines(workspace):
    lines = (workspace / 'reverse.txt').read_text(encoding='utf-8').splitlines()
    assert len(lines) == 10 and all('\t' in line for line in lines)
    assert (workspace / 'vocab.txt').read_text(encoding='utf-8').splitlines()[0] == '[PAD]'


def test_missing_required_flag_fails(caplog):
    assert main(['synth', '--task', 'echo']) == 1
    assert 'synth requires --out' in caplog.text


def test_bad_config_file_fails(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('training:\n  epochs: 3\n', encoding='utf-8')
    assert main(['synth', '--config', str(path), '--task', 'echo', '--out', str(tmp_path / 'x.txt')]) == 1


def test_finetune_generate_evaluate(workspace, capsys):
    config, corpus, vocab, ckpt, hyp, cal = _paths(
        workspace, 'run.yaml', 'reverse.txt', 'vocab.txt', 'dec.ckpt', 'dec.txt', 'cal.yaml')
    common = ['--config', config, '--corpus', corpus, '--vocab', vocab]
    assert main(['finetune', *common, '--framework', 'dec', '--steps', '3', '--out', ckpt]) == 0
    assert load_checkpoint(ckpt).framework == 'dec'

    assert main(['calibrate', *common, '--init', ckpt, '--subset', '4', '--out', cal]) == 0
    calibration = yaml.safe_load((workspace / 'cal.yaml').read_text(encoding='utf-8'))
    assert calibration['framework'] == 'dec' and 1 <= calibration['min_len'] <= 6

    assert main(['generate', *common, '--init', ckpt, '--calibration', cal, '--out', hyp]) == 0
    responses = (workspace / 'dec.txt').read_text(encoding='utf-8').splitlines()
    assert len(responses) == 10

    capsys.readouterr()
    assert main(['evaluate', '--hyp', hyp, '--ref', corpus, '--framework', 'dec']) == 0
    output = capsys.readouterr().out
    assert 'BLEU-1' in output and 'count=10' in output and 'copy_rate=' in output


def test_generate_rejects_pretrained_checkpoint(workspace):
    config, corpus, vocab, ckpt = _paths(workspace, 'run.yaml', 'reverse.txt', 'vocab.txt', 'lm.ckpt')
    common = ['--config', config, '--corpus', corpus, '--vocab', vocab]
    assert main(['pretrain', *common, '--objective', 'ar', '--steps', '2', '--out', ckpt]) == 0
    assert main(['generate', *common, '--init', ckpt, '--out', str(workspace / 'out.txt')]) == 1


def test_compare_prints_one_row_per_system(tmp_path, capsys):
    ref = tmp_path / 'ref.txt'
    ref.write_text('a b c\nd e f\ng h i\n', encoding='utf-8')
    good = tmp_path / 'good.txt'
    good.write_text('a b c\nd e f\ng h i\n', encoding='utf-8')
    bad = tmp_path / 'bad.txt'
    bad.write_text('a x\nd y\nz\n', encoding='utf-8')
    capsys.readouterr()
    assert main(['compare', '--hyp', f'MLM={good},Dec={bad}', '--ref', str(ref)]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert [row.split()[0] for row in rows] == ['Model', 'MLM', 'Dec']


def test_read_responses(tmp_path):
    plain = tmp_path / 'plain.txt'
    plain.write_text('hello there\nok\n', encoding='utf-8')
    assert read_responses(str(plain)) == (['hello there', 'ok'], None)
    corpus = tmp_path / 'corpus.txt'
    corpus.write_text('hi [SEP] how are you\tfine\nyo\tsup\n', encoding='utf-8')
    assert read_responses(str(corpus)) == (['fine', 'sup'], ['how are you', 'yo'])


def test_read_responses_blank_file_is_plain(tmp_path):
    blank = tmp_path / 'blank.txt'
    blank.write_text('\n\n', encoding='utf-8')
    assert read_responses(str(blank)) == (['', ''], None)
