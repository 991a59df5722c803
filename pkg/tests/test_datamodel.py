from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupscore.datamodel import (
    N_ACTIVITIES,
    AccountStatic,
    ActivityEvent,
    ActivityType,
    ConversionLabel,
    DataFormatError,
    Dataset,
    IndividualStatic,
    WeekSequence,
    absolute_week,
    format_timestamp,
    parse_timestamp,
    read_dataset,
    read_events,
    validate_dataset,
    week_start,
    write_dataset,
)
from groupscore.synthgen import SynthConfig, generate

from _builders import T0, at, ev

NAMES = [
    "open_email",
    "click_email",
    "send_email",
    "unsubscribe_email",
    "open_sales_email",
    "click_sales_email",
    "send_sales_email",
    "forwarded_email_received",
    "forwarded_email_sent",
]


def test_activity_encoding_is_a_bijection_onto_0_to_8():
    assert N_ACTIVITIES == 9
    assert [a.name for a in ActivityType] == NAMES
    assert sorted(int(a) for a in ActivityType) == list(range(9))
    for name in NAMES:
        assert ActivityType(int(ActivityType.parse(name))).name == name


def test_unknown_activity_name_rejected():
    with pytest.raises(ValueError, match="unknown activity"):
        ActivityType.parse("call_phone")


def test_weeks_run_sunday_through_saturday():
    sunday = datetime(2021, 1, 3, tzinfo=timezone.utc)
    assert sunday.weekday() == 6
    w = absolute_week(sunday)
    assert absolute_week(sunday + timedelta(days=6, hours=23, minutes=59, seconds=59)) == w
    assert absolute_week(sunday + timedelta(days=7)) == w + 1
    assert absolute_week(sunday - timedelta(seconds=1)) == w - 1
    assert week_start(w) == sunday
    assert absolute_week(datetime(1970, 1, 4, tzinfo=timezone.utc)) == 0


def test_timestamp_text_round_trip():
    ts = datetime(2021, 3, 4, 5, 6, 7, tzinfo=timezone.utc)
    assert format_timestamp(ts) == "2021-03-04T05:06:07Z"
    assert parse_timestamp("2021-03-04T05:06:07Z") == ts
    assert parse_timestamp("2021-03-04T06:06:07+01:00") == ts


def test_conversion_time_present_iff_converted():
    with pytest.raises(ValueError):
        ConversionLabel("a", True)
    with pytest.raises(ValueError):
        ConversionLabel("a", False, T0)


def test_inactive_week_is_all_padding():
    w = WeekSequence.inactive(3)
    assert w.valid_len == 0 and w.week_index == 3
    assert not w.codes.any() and not w.deltas.any() and not w.counts.any()


def test_week_equality_ignores_padding_slots():
    a = WeekSequence(0, np.array([1, 2, 7, 7, 0, 0, 0, 0, 0]), 2, np.zeros(9), np.eye(9, dtype=int)[1])
    b = WeekSequence(0, np.array([1, 2, 0, 0, 0, 0, 0, 0, 0]), 2, np.zeros(9), np.eye(9, dtype=int)[1])
    assert a == b


# ------------------------------------------------------------------ files

_ids = st.text(alphabet="abcxyz019_-", min_size=1, max_size=6)
_instants = st.integers(0, 400 * 24 * 3600).map(lambda s: T0 + timedelta(seconds=s))


@st.composite
def datasets(draw):
    n_acc = draw(st.integers(1, 4))
    accounts, individuals, events, labels = [], [], [], []
    for a in range(n_acc):
        acc = f"acc{a}-" + draw(_ids)
        accounts.append(
            AccountStatic(acc, draw(st.floats(0, 1e9, allow_nan=False)), draw(st.integers(0, 10**6)))
        )
        converted = draw(st.booleans())
        labels.append(ConversionLabel(acc, converted, draw(_instants) if converted else None))
        for k in range(draw(st.integers(1, 3))):
            ind = f"{acc}/{k}"
            individuals.append(
                IndividualStatic(ind, draw(st.sampled_from(["web", "ad", "a,b", 'q"t'])), draw(st.booleans()), draw(st.booleans()))
            )
            for _ in range(draw(st.integers(0, 4))):
                events.append(ActivityEvent(acc, ind, draw(_instants), draw(st.sampled_from(list(ActivityType)))))
    return Dataset(events, labels, individuals, accounts)


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_serialise_parse_round_trip(tmp_path_factory, ds):
    d = tmp_path_factory.mktemp("rt")
    write_dataset(ds, d)
    assert read_dataset(d) == ds


def test_unknown_activity_in_file_reports_file_and_line(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text(
        "account_id,individual_id,timestamp,activity\n"
        "a,i,2021-01-03T00:00:00Z,open_email\n"
        "a,i,2021-01-03T00:00:01Z,phone_call\n"
    )
    with pytest.raises(DataFormatError) as err:
        read_events(p)
    assert err.value.line == 3
    assert "events.csv" in str(err.value) and "phone_call" in str(err.value)


def test_wrong_header_rejected(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("account,individual,time,activity\n")
    with pytest.raises(DataFormatError) as err:
        read_events(p)
    assert err.value.line == 1


def test_short_row_rejected(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("account_id,individual_id,timestamp,activity\na,i,2021-01-03T00:00:00Z\n")
    with pytest.raises(DataFormatError, match="expected 4 fields"):
        read_events(p)


def test_missing_file_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="events.csv"):
        read_dataset(tmp_path)


# -------------------------------------------------------------- validation


def test_individual_in_two_accounts_is_fatal_and_named():
    events = [ev("shared", 0, acc="a1"), ev("shared", 1, acc="a2"), ev("solo", 0, acc="a1")]
    report = validate_dataset(events, [])
    assert report.fatal
    bad = report.of_kind("multi_account_individual")
    assert [i.subject for i in bad] == ["shared"]


def test_empty_dataset_is_clean():
    report = validate_dataset([], [])
    assert report.issues == [] and report.n_accounts == 0 and not report.fatal


def test_duplicate_rows_warn_only():
    e = ev("i", 0)
    report = validate_dataset([e, e], [])
    assert not report.fatal
    assert report.of_kind("duplicate_event")[0].subject == "i"


def test_label_without_events_and_conversion_outside_span():
    events = [ev("i", 0), ev("i", 5)]
    labels = [ConversionLabel("ghost", False), ConversionLabel("a1", True, at(9))]
    report = validate_dataset(events, labels)
    assert report.of_kind("label_without_events")[0].subject == "ghost"
    assert report.of_kind("conversion_outside_span")[0].subject == "a1"
    assert report.fatal
    # the week right after the last event is still a valid conversion week
    ok = validate_dataset(events, [ConversionLabel("a1", True, at(6, 3))])
    assert not ok.fatal


def test_events_outside_explicit_span_are_fatal():
    events = [ev("i", 0), ev("i", 3)]
    report = validate_dataset(events, [], span=(at(0), at(2)))
    assert [i.kind for i in report.issues] == ["event_outside_span"]
    assert report.fatal


def test_missing_statics_are_fatal():
    events = [ev("i", 0), ev("j", 0)]
    report = validate_dataset(events, [], [IndividualStatic("i", "web")], [AccountStatic("zz", 1.0, 1)])
    kinds = sorted(i.kind for i in report.issues)
    assert kinds == ["missing_account_static", "missing_individual_static"]


def test_generated_dataset_validates():
    ds, _ = generate(SynthConfig(n_accounts=40, seed=5))
    report = validate_dataset(ds.events, ds.labels, ds.individuals, ds.accounts)
    assert not report.fatal, report.summary()
    assert report.n_accounts == 40
