"""Corpus of broken stack and station files, each paired with the position its diagnostic should name."""
import numpy as np

from pollutionnet.data_io import stack_to_bytes
from pollutionnet.grid import FieldStack, GridSpec

SPEC = GridSpec(51.0, 52.0, -9.0, -8.0, 0.25, 4, 4)


def good_stack_bytes(n_times=3):
    vals = np.arange(n_times * 16, dtype=float).reshape(n_times, 4, 4)
    vals[0, 1, 1] = np.nan
    return stack_to_bytes(FieldStack(SPEC, range(n_times), vals))


def _header(dims="51.0 52.0 -9.0 -8.0 0.25 4 4 3", days="0 1 2"):
    return f"GSTK1\n{dims}\n{days}\n".encode()


def stack_cases():
    good = good_stack_bytes()
    body = good[len(_header()):]
    hdr = len(_header())
    inf = bytearray(good)
    inf[hdr + 8:hdr + 12] = np.array([np.inf], "<f4").tobytes()
    return [
        ("empty", b"", 0),
        ("bad magic", b"GSTK2" + good[5:], 0),
        ("lowercase magic", b"gstk1" + good[5:], 0),
        ("magic only", b"GSTK1\n", 6),
        ("no newline after magic", b"GSTK1 " + good[6:], 0),
        ("missing dims field", _header(dims="51.0 52.0 -9.0 -8.0 0.25 4 4") + body, 6),
        ("extra dims field", _header(dims="51.0 52.0 -9.0 -8.0 0.25 4 4 3 9") + body, 6),
        ("non-numeric dims", _header(dims="51.0 52.0 -9.0 -8.0 x 4 4 3") + body, 6),
        ("float row count", _header(dims="51.0 52.0 -9.0 -8.0 0.25 4.5 4 3") + body, 6),
        ("zero rows", _header(dims="51.0 52.0 -9.0 -8.0 0.25 0 4 3") + body, 6),
        ("negative times", _header(dims="51.0 52.0 -9.0 -8.0 0.25 4 4 -1") + body, 6),
        ("inverted box", _header(dims="52.0 51.0 -9.0 -8.0 0.25 4 4 3") + body, 6),
        ("nan bound", _header(dims="nan 52.0 -9.0 -8.0 0.25 4 4 3") + body, 6),
        ("dimension overflow", _header(dims="51.0 52.0 -9.0 -8.0 0.25 100000 100000 3") + body, 6),
        ("day count mismatch", _header(days="0 1") + body, hdr - 6),
        ("non-integer day", _header(days="0 1 x") + body, hdr - 6),
        ("unsorted days", _header(days="0 2 1") + body, hdr - 6),
        ("duplicate days", _header(days="0 1 1") + body, hdr - 6),
        ("unterminated day line", b"GSTK1\n51.0 52.0 -9.0 -8.0 0.25 4 4 3\n0 1 2", hdr - 6),
        ("truncated payload", good[:-4], hdr),
        ("truncated to header", good[:hdr], hdr),
        ("trailing bytes", good + b"\x00\x00", hdr),
        ("infinite value", bytes(inf), hdr + 8),
        ("binary junk in header", b"GSTK1\n\xff\xfe\n" + body, 6),
    ]


STATION_HEADER = "station_id,lat,lon,day,value\n"


def station_cases():
    ok = "A,51.5,-8.5,0,3.0\n"
    return [
        ("empty station file", "", 1),
        ("bad header", "id,lat,lon,day,value\n" + ok, 1),
        ("missing column", STATION_HEADER + ok + "B,51.5,-8.5,0\n", 3),
        ("extra column", STATION_HEADER + "B,51.5,-8.5,0,1.0,9\n", 2),
        ("nan latitude", STATION_HEADER + ok + ok + "C,nan,-8.5,0,1.0\n", 4),
        ("nan longitude", STATION_HEADER + "C,51.5,NaN,0,1.0\n", 2),
        ("infinite latitude", STATION_HEADER + "C,inf,-8.5,0,1.0\n", 2),
        ("non-numeric value", STATION_HEADER + "C,51.5,-8.5,0,abc\n", 2),
        ("negative value", STATION_HEADER + "C,51.5,-8.5,0,-1\n", 2),
        ("nan value", STATION_HEADER + "C,51.5,-8.5,0,nan\n", 2),
        ("fractional day", STATION_HEADER + "C,51.5,-8.5,1.5,1.0\n", 2),
        ("empty id", STATION_HEADER + ",51.5,-8.5,0,1.0\n", 2),
        ("comma decimal", STATION_HEADER + 'C,"51,5",-8.5,0,1.0\n', 2),
        ("latitude out of range", STATION_HEADER + "C,95.0,-8.5,0,1.0\n", 2),
        ("station south of box", STATION_HEADER + ok + "D,50.0,-8.5,0,1.0\n", 3),
        ("station east of box", STATION_HEADER + "D,51.5,-7.0,0,1.0\n", 2),
    ]
