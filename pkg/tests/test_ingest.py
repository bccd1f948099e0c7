import io
from datetime import date

import pytest

from fleetemit.ingest import (
    INSPECTIONS_HEADER,
    Diagnostic,
    EmissionsMeasurement,
    TestEvent,
    VehicleRecord,
    age_at,
    parse_certifications,
    parse_inspections,
    qc_filter,
    write_certifications,
    write_inspections,
)


HEADER = ",".join(INSPECTIONS_HEADER)


def parse_text(text):
    return parse_inspections(io.StringIO(text))


def record(vid="V1", first_use="2010-01-01", **kw):
    rec = VehicleRecord(vehicle_id=vid, first_use_date=date.fromisoformat(first_use))
    for k, v in kw.items():
        setattr(rec, k, v)
    return rec


# ---------------------------------------------------------------------------
# parsing


def test_empty_file_with_header():
    records, diags = parse_text(HEADER + "\n")
    assert records == []
    assert diags == []


def test_header_mismatch_is_fatal():
    with pytest.raises(ValueError, match="header"):
        parse_text("vehicle_id,nope\n")


def test_unparseable_date_skips_row_with_diagnostic():
    text = HEADER + "\nV1,FORD,FOCUS,PET,1600,4,2010-13-45,,,,,,\n"
    records, diags = parse_text(text)
    assert records == []
    assert len(diags) == 1
    assert diags[0].line == 2


def test_three_rows_merge_into_one_record():
    text = HEADER + "\n" + "\n".join(
        f"V1,FORD,FOCUS,PET,1600,4,2008-03-01,{d},pass,1000,AB1,,"
        for d in ("2011-03-02", "2012-03-05", "2013-03-01")
    ) + "\n"
    records, diags = parse_text(text)
    assert diags == []
    assert len(records) == 1
    rec = records[0]
    assert len(rec.tests) == 3
    assert rec.make == "FORD"
    assert rec.engine_cc == 1600.0
    assert rec.tests[0] == TestEvent(date(2011, 3, 2), "pass", 1000)


def test_lifecycle_only_row_has_no_tests():
    text = HEADER + "\nV1,FORD,KA,PET,1300,4,2005-01-01,,,,AB1,2015-06-01,\n"
    records, _ = parse_text(text)
    assert records[0].tests == []
    assert records[0].export_date == date(2015, 6, 1)


def test_unknown_fuel_code_rejected():
    text = HEADER + "\nV1,FORD,KA,XXX,1300,4,2005-01-01,,,,,,\n"
    records, diags = parse_text(text)
    assert records == []
    assert "fuel" in diags[0].message


def test_nonpositive_engine_cc_rejected():
    text = HEADER + "\nV1,FORD,KA,PET,0,4,2005-01-01,,,,,,\n"
    records, diags = parse_text(text)
    assert records == []
    assert "engine_cc" in diags[0].message


def test_certifications_parse_and_reject_empty_rows():
    text = (
        "make,model,model_year,fuel_type,co2_g_km,nox_mg_km,thc_mg_km,co_mg_km,mpg\n"
        "FORD,FOCUS,2010,PET,150.5,40,10,500,45\n"
        "FORD,KA,2009,PET,,,,,\n"
    )
    measurements, diags = parse_certifications(io.StringIO(text))
    assert len(measurements) == 1
    assert measurements[0].co2_g_km == 150.5
    assert len(diags) == 1


# ---------------------------------------------------------------------------
# qc_filter


def test_dual_disposition_rejected():
    rec = record(export_date=date(2015, 1, 1), scrap_date=date(2016, 1, 1))
    clean, report = qc_filter([rec])
    assert clean == []
    assert report.counts["dual_disposition"] == 1
    assert report.reconciles()


def test_age_over_110_rejected_exactly_110_retained():
    over = record(first_use="1900-01-01", export_date=date(2011, 1, 15))
    exactly = record(vid="V2", first_use="1900-01-01")
    exactly.export_date = date(2010, 1, 1)  # 40177 days = 109.99 years
    clean, report = qc_filter([over, exactly])
    assert report.counts["over_110_years"] == 1
    assert [r.vehicle_id for r in clean] == ["V2"]
    assert age_at(over, over.export_date) > 110.0


def test_event_before_first_use_rejected():
    rec = record(export_date=date(2009, 12, 31))
    clean, report = qc_filter([rec])
    assert clean == []
    assert report.counts["impossible_dates"] == 1


def test_missing_first_use_rejected():
    rec = VehicleRecord(vehicle_id="V1")
    _, report = qc_filter([rec])
    assert report.counts["missing_required_field"] == 1


def test_backdating_window():
    rec = record(tests=[TestEvent(date(2018, 1, 1), "pass")],
                 export_date=date(2015, 1, 1))
    clean, _ = qc_filter([rec])
    assert clean  # no window configured: allowed
    clean, report = qc_filter([rec], backdating_window_days=365)
    assert clean == []
    assert report.counts["impossible_dates"] == 1


def test_qc_conservation_and_idempotence():
    records = [
        record(vid=f"V{i}", tests=[TestEvent(date(2012, 1, 1), "pass")])
        for i in range(5)
    ]
    records.append(record(vid="bad1", export_date=date(2015, 1, 1),
                          scrap_date=date(2015, 2, 1)))
    records.append(VehicleRecord(vehicle_id="bad2"))
    clean, report = qc_filter(records)
    assert report.total_input == 7
    assert report.total_retained == 5
    assert report.reconciles()
    again, report2 = qc_filter(clean)
    assert len(again) == len(clean)
    assert report2.total_rejected == 0


# ---------------------------------------------------------------------------
# age_at


def test_age_same_day_is_zero():
    rec = record()
    assert age_at(rec, date(2010, 1, 1)) == 0.0


def test_age_spec_examples():
    rec = record(first_use="2010-01-01")
    assert abs(age_at(rec, date(2018, 7, 2)) - 8.5) < 0.01
    rec4 = record(first_use="2012-01-01")
    assert abs(age_at(rec4, date(2016, 1, 1)) - 4.0) < 0.003


def test_age_before_first_use_raises():
    with pytest.raises(ValueError):
        age_at(record(), date(2009, 1, 1))


# ---------------------------------------------------------------------------
# round-trip


def test_write_parse_write_fixed_point():
    records = [
        record(
            vid="V1", make="FORD", model="FOCUS", fuel_type="PET",
            engine_cc=1600.0, test_class=4,
            tests=[TestEvent(date(2013, 5, 1), "pass", 42000),
                   TestEvent(date(2014, 5, 3), "fail", None)],
            postcode_region="AB1",
        ),
        record(vid="V2", make="VW", model="GOLF", fuel_type="DIE",
               engine_cc=1900.0, test_class=4, export_date=date(2016, 7, 1)),
    ]
    buf1 = io.StringIO()
    write_inspections(records, buf1)
    parsed, diags = parse_inspections(io.StringIO(buf1.getvalue()))
    assert diags == []
    buf2 = io.StringIO()
    write_inspections(parsed, buf2)
    assert buf1.getvalue() == buf2.getvalue()
    assert parsed == records


def test_certifications_round_trip():
    rows = [
        EmissionsMeasurement("FORD", "FOCUS", 2010, "PET", co2_g_km=150.0,
                             nox_mg_km=40.0, thc_mg_km=None, co_mg_km=500.0, mpg=45.0),
    ]
    buf = io.StringIO()
    write_certifications(rows, buf)
    parsed, diags = parse_certifications(io.StringIO(buf.getvalue()))
    assert diags == []
    assert parsed == rows
