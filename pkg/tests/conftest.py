import pytest

from detcal.core import Detection, GroundTruthObject, MatchedDetection, NormBox

CENTER = NormBox(0.5, 0.5, 0.2, 0.2)


def md(score, m, box=CENTER, label=0, image_id=0):
    """A matched detection with a given correctness flag."""
    return MatchedDetection(Detection(image_id, label, score, box), int(m))


def gt(box, label=0, image_id=0, gt_id=None):
    return GroundTruthObject(image_id, label, box, gt_id)


def det(box, score, label=0, image_id=0):
    return Detection(image_id, label, score, box)


@pytest.fixture
def hand_case():
    """Four detections in two confidence bins: gaps 0.35 and 0.15."""
    return [md(0.9, 1), md(0.8, 0), md(0.3, 0), md(0.4, 1)]


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
