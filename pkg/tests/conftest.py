import sys
import textwrap

import pytest

TINY_CONFIG = textwrap.dedent("""\
    name: tiny
    data:
      kind: synthetic
      train:
        - {name: env1, n_samples: 40, color_correlation: 0.9, seed: 1}
        - {name: env2, n_samples: 40, color_correlation: 0.8, seed: 2}
      test: {name: test, n_samples: 50, color_correlation: 0.1, seed: 3}
    model:
      layer_sizes: [4, 5, 5, 2]
    train:
      steps: 12
      learning_rate: 0.01
      optimizer: adam
      record_every: 4
    penalty:
      method: hutchinson
      alpha: 1.0
      beta: 1.0
      anneal_step: 6
      post_anneal_value: 100.0
      num_samples: 3
    runs: 2
    seed_base: 5
    attack:
      deltas: [0.01, 0.1, 1.0]
      rounds: 3
      ascent_steps: 2
    fgsm:
      epsilons: [0.0, 0.1, 0.2]
    """)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.result_lines():
        terminalreporter.write_line(line)
