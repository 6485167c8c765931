"""Score machine-labeled pages against human ground truth.

Detections and truth boxes are matched greedily in confidence order under an
IoU threshold; label agreement is scored through the glossary and ontology,
so a related-but-wrong word earns partial credit instead of zero. Run with:

    python3 demos/06_score_predictions.py
"""

from treatise import fixtures
from treatise.catalog import ImageRecord, LabelAssignment, Provenance, utc_timestamp
from treatise.evaluation import (
    aggregate,
    evaluate,
    format_report_table,
    truth_from_record,
)
from treatise.raster import BoundingBox, MaskRLE, Segment


def page(image_id, boxes, source):
    """boxes: list of (x, y, w, h, text, confidence)."""
    segments, assignments = [], {}
    for i, (x, y, w, h, text, conf) in enumerate(boxes, start=1):
        segments.append(Segment(
            id=i, bbox=BoundingBox(x, y, w, h),
            mask=MaskRLE(width=w, height=h, counts=(0, w * h)),
            area=w * h, contour=((x, y),),
        ))
        assignments[i] = (LabelAssignment(text=text, confidence=conf,
                                          source=source),)
    return ImageRecord(
        image_id=image_id, source_path="", width=32, height=32,
        segments=tuple(segments), assignments=assignments,
        provenance=Provenance(method="native", timestamp=utc_timestamp()),
    )


def main():
    glossary = fixtures.glossary()
    graph = fixtures.ontology()

    truth = truth_from_record(page("page-a", [
        (0, 0, 8, 8, "keel", 1.0),
        (16, 16, 8, 8, "sternpost", 1.0),
    ], source="human"))

    # a careful prediction: right boxes, one synonym in another language
    good = page("page-a", [
        (0, 0, 8, 8, "quilha", 0.9),
        (16, 16, 8, 8, "sternpost", 0.8),
    ], source="tagger")

    # a sloppy one: box drifted, one label only loosely related
    sloppy = page("page-a", [
        (2, 2, 8, 8, "keel", 0.7),
        (16, 16, 8, 8, "heel", 0.6),
    ], source="tagger")

    reports = []
    for name, record in [("careful", good), ("sloppy", sloppy)]:
        report = evaluate(record, truth, glossary, graph)
        reports.append(report)
        print(f"{name}: precision={report.precision:.2f} "
              f"recall={report.recall:.2f} soft-F1={report.soft_f1:.3f} "
              f"mean IoU={report.mean_iou:.3f} "
              f"mean label score={report.mean_label_score:.3f}")

    print("\nmicro-averaged over both runs:")
    print(format_report_table(reports + [aggregate(reports)]))


if __name__ == "__main__":
    main()
