from pathlib import Path

import numpy as np
import pytest

from florence2_ros2.clients import (
    ClientInvocation,
    ClientMode,
    EngineTransport,
    ExitCode,
    build_parser,
    format_request,
    main,
    run_client,
)
from florence2_ros2.contract import RasterImage
from florence2_ros2.errors import ConfigError, ErrorCode, Florence2Error

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def frame_path(tmp_path):
    path = tmp_path / "frame.png"
    RasterImage.from_array(np.full((3, 4, 3), 128, dtype=np.uint8)).to_pil().save(path)
    return str(path)


def _run(inv, transport):
    lines = []
    code = run_client(inv, transport, out=lines.append)
    return code, lines


def _golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8").splitlines()


@pytest.mark.parametrize("golden, mode, task, cancel_after, expected", [
    ("service_caption.txt", ClientMode.SERVICE, "<CAPTION>", None, ExitCode.OK),
    ("action_od.txt", ClientMode.ACTION, "<OD>", None, ExitCode.OK),
    ("action_cancel_immediate.txt", ClientMode.ACTION, "<OD>", 0.0, ExitCode.CANCELED),
    ("action_cancel_during_inference.txt", ClientMode.ACTION, "<OD>", 0.05, ExitCode.CANCELED),
    ("service_unknown_task.txt", ClientMode.SERVICE, "<BAD>", None, ExitCode.ERROR),
])
def test_client_matches_golden(make_engine, frame_path, golden, mode, task, cancel_after, expected):
    inv = ClientInvocation(mode=mode, task_token=task, image_path=frame_path, cancel_after=cancel_after)
    code, lines = _run(inv, EngineTransport(make_engine(latency=0.1)))
    assert code == expected
    assert lines == _golden(golden)


def test_client_latest_with_empty_cache(make_engine):
    inv = ClientInvocation(mode=ClientMode.SERVICE, task_token="<OD>")
    code, lines = _run(inv, EngineTransport(make_engine()))
    assert code == ExitCode.ERROR
    assert lines == _golden("service_latest_empty_cache.txt")


def test_client_latest_uses_cache(make_engine, frame_path):
    engine = make_engine()
    engine.on_image(RasterImage.from_file(frame_path))
    inv = ClientInvocation(mode=ClientMode.SERVICE, task_token="<OD>", use_latest_image=True)
    code, lines = _run(inv, EngineTransport(engine))
    assert code == ExitCode.OK
    assert "detections: 1" in lines


def test_client_unreadable_image(make_engine, tmp_path):
    bogus = tmp_path / "not_an_image.png"
    bogus.write_text("hello")
    inv = ClientInvocation(mode=ClientMode.SERVICE, task_token="<OD>", image_path=str(bogus))
    code, lines = _run(inv, EngineTransport(make_engine()))
    assert code == ExitCode.ERROR
    assert lines[-1] == "exit: ERROR"


class _FailingTransport:
    def __init__(self, code):
        self.code = code

    def call_service(self, req, timeout):
        raise Florence2Error(self.code, "no node")

    def send_goal(self, req, on_feedback, cancel_after, timeout):
        raise Florence2Error(self.code, "no node")


@pytest.mark.parametrize("error, expected", [
    (ErrorCode.TIMEOUT, ExitCode.TIMEOUT),
    (ErrorCode.NODE_UNREACHABLE, ExitCode.NODE_UNREACHABLE),
    (ErrorCode.BUSY, ExitCode.ERROR),
])
def test_transport_errors_map_to_exit_codes(frame_path, error, expected):
    for mode in ClientMode:
        inv = ClientInvocation(mode=mode, task_token="<OD>", image_path=frame_path)
        code, lines = _run(inv, _FailingTransport(error))
        assert code == expected
        assert lines[-2] == f"error: {error.value}: no node"
        assert lines[-1] == f"exit: {expected.name}"


def test_exit_codes_are_distinct():
    assert len({int(c) for c in ExitCode}) == len(ExitCode)


def test_cancel_after_only_for_actions():
    with pytest.raises(ConfigError):
        ClientInvocation(mode=ClientMode.SERVICE, task_token="<OD>", cancel_after=1.0)
    with pytest.raises(ConfigError):
        ClientInvocation(mode=ClientMode.ACTION, task_token="<OD>", cancel_after=-1.0)
    with pytest.raises(ConfigError):
        ClientInvocation(mode=ClientMode.ACTION, task_token="<OD>", timeout=0)


def test_format_request_with_text():
    inv = ClientInvocation(mode=ClientMode.ACTION, task_token="<OPEN_VOCABULARY_DETECTION>",
                           text_input="person", image_path="/data/street.jpg")
    assert format_request(inv) == (
        "request: mode=action task=<OPEN_VOCABULARY_DETECTION> image=street.jpg text='person'")


def test_parser():
    args = build_parser().parse_args(
        ["action", "--task", "<OD>", "--use-latest", "--cancel-after", "0.2", "--in-process"])
    assert args.mode == "action"
    assert args.use_latest and args.in_process
    assert args.cancel_after == 0.2


def test_main_in_process(frame_path, capsys):
    code = main(["service", "--task", "<OD>", "--image", frame_path, "--in-process",
                 "--mock-latency", "0"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0] == "request: mode=service task=<OD> image=frame.png"
    assert out[-1] == "exit: OK"


def test_main_rejects_bad_invocation(capsys):
    assert main(["service", "--task", "<OD>", "--cancel-after", "1", "--in-process"]) == 1
    assert "CONFIG_INVALID" in capsys.readouterr().err
