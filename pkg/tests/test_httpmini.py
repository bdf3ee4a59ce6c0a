import pytest

from motsim.experiments import run_experiment
from motsim.httpmini import (ConnectionOutcome, HttpError, HttpRequest, HttpResponse,
                             parse_request, parse_response)
from motsim.mots import FlagsMode


def test_request_roundtrip():
    req = HttpRequest("/index.html", {"Host": "server.lab", "Cookie": "sid=1"})
    raw = req.serialize()
    assert raw.startswith(b"GET /index.html HTTP/1.1\r\n") and raw.endswith(b"\r\n\r\n")
    assert parse_request(raw) == req


def test_response_roundtrip_and_content_length():
    resp = HttpResponse(200, b"<p>x</p>", {"Content-Type": "text/html"})
    raw = resp.serialize()
    assert b"Content-Length: 8\r\n" in raw
    back = parse_response(raw)
    assert back.status_code == 200 and back.body == b"<p>x</p>"
    assert not back.content_length_mismatch


def test_overrun_is_flagged_not_lost():
    raw = HttpResponse(200, b"abc").serialize() + b"EXTRA"
    back = parse_response(raw)
    assert back.body == b"abc" and back.trailing == b"EXTRA" and back.content_length_mismatch


def test_redirect_requires_location():
    with pytest.raises(HttpError):
        HttpResponse(301)
    assert HttpResponse(302, headers={"Location": "http://x/"}).is_redirect


@pytest.mark.parametrize("raw", [b"HTTP/1.0 200 OK\r\n\r\n", b"garbage", b"HTTP/1.1 abc\r\n\r\n",
                                 b"HTTP/1.1 200 OK\r\nbroken\r\n\r\n"])
def test_bad_responses(raw):
    with pytest.raises(HttpError):
        parse_response(raw)


def test_baseline_fetch():
    r = run_experiment("baseline-http", seed=4)
    view = r.client_view
    assert view.response.status_code == 200
    assert view.rendered_body.startswith(b"<html><head><title>Intranet")
    assert view.connection_outcome is ConnectionOutcome.CLOSED_BY_FIN
    assert [e.target for e in r.server.log] == ["/"]


def test_unknown_path_is_404():
    from motsim.httpmini import HttpServer
    class Host:  # just enough of a host for routing
        processing_delay = 0
        def listen(self, port, factory): pass
    srv = HttpServer(Host(), {"/": b"ok"})
    assert srv.route(HttpRequest("/missing")).status_code == 404


def test_push_ack_variant_concatenates_tail():
    r = run_experiment("1", seed=4, flags_mode=FlagsMode.PUSH_ACK)
    from motsim.experiments import FORGED_PAGE, LEGIT_PAGE
    legit = HttpResponse(200, LEGIT_PAGE, {"Content-Type": "text/html",
                                           "Connection": "close"}).serialize()
    forged = HttpResponse(200, FORGED_PAGE, {"Content-Type": "text/html",
                                             "Connection": "close"}).serialize()
    txn = r.client_view.transactions[0]
    assert txn.raw == forged + legit[len(forged):]
    assert r.client_view.response.content_length_mismatch
