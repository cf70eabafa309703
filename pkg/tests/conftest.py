import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def trained_sphere():
    """Object field trained for 2000 iterations on a fully orbited 0.3 m sphere."""
    from fixtures import sphere_scene
    from catfield.geom import fit_obb
    from catfield.render import field_box, train_object_model
    from catfield.synth import back_project, build_scene, render_sequence

    scene = build_scene(sphere_scene())
    frames = render_sequence(scene)
    obs = back_project(frames, 1, scene)
    box = field_box(fit_obb(obs.cloud))
    result = train_object_model(frames, obs, box)
    return {"scene": scene, "frames": frames, "obs": obs, "box": box, "result": result}


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
