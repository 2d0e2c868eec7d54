"""Model inputs: visit sequences and the hand-crafted domain vector.

Each eligible index event becomes a sequence of multi-hot visit steps over
CCS category indices plus a fixed-width vector z of demographic, index-stay,
utilization, comorbidity, and hospital-acquired-condition features. The
layout of z is data-driven (see seqfuse/data/domain_spec.json), and the
name list returned alongside the values always matches positionally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .claims import Beneficiary, ClaimRecord
from .cohort import IndexEvent, InpatientStay, age_band
from .errors import ValidationError
from .knowledge import (
    CcsMap,
    DomainFeature,
    KnowledgeBundle,
    charlson_index,
    hac_flags,
    lace_score,
)

__all__ = [
    "SequenceOptions",
    "SequenceStep",
    "PatientSequence",
    "build_sequence",
    "build_domain_vector",
    "featurize_events",
    "charlson_index",
    "hac_flags",
    "lace_score",
]


@dataclass(frozen=True)
class SequenceOptions:
    include_outpatient: bool = True
    exclude_index_step: bool = False
    lookback_days: int = 365


@dataclass(frozen=True)
class SequenceStep:
    day_offset: int
    indices: tuple[int, ...]


@dataclass
class PatientSequence:
    event_id: str
    beneficiary_id: str
    steps: list[SequenceStep]
    z: list[float]
    readmit_label: bool
    mortality_label: bool
    mortality_excluded: bool
    subgroup: dict[str, object] = field(default_factory=dict)

    def label_for(self, task: str) -> bool:
        if task == "readmission":
            return self.readmit_label
        if task == "mortality":
            return self.mortality_label
        raise ValidationError(f"unknown task {task!r}")


def _stay_indices(stay: InpatientStay, ccs: CcsMap) -> tuple[int, ...]:
    indices = {ccs.dx_index(c) for c in stay.all_dx}
    indices.update(ccs.proc_index(p) for p in stay.all_proc)
    return tuple(sorted(indices))


def _claim_indices(claim: ClaimRecord, ccs: CcsMap) -> tuple[int, ...]:
    indices = {ccs.dx_index(c) for c in claim.dx_codes}
    indices.update(ccs.proc_index(p) for p in claim.proc_codes)
    return tuple(sorted(indices))


def build_sequence(
    event: IndexEvent,
    claims: list[ClaimRecord],
    stays: list[InpatientStay],
    ccs: CcsMap,
    opts: SequenceOptions = SequenceOptions(),
) -> list[SequenceStep]:
    """Ordered visit steps for one index event.

    History covers admissions in [index admit - lookback, index admit);
    inpatient steps come from resolved stays so transfer chains appear once.
    Same-day steps order by record id, so output is stable. The index stay
    itself is the final step unless excluded, and excluding it requires at
    least one history step to remain.
    """
    index_admit = event.stay.admit_date
    horizon = index_admit - opts.lookback_days
    keyed: list[tuple[int, str, tuple[int, ...]]] = []
    for stay in stays:
        if stay.beneficiary_id == event.stay.beneficiary_id and horizon <= stay.admit_date < index_admit:
            keyed.append((stay.admit_date - index_admit, stay.stay_id, _stay_indices(stay, ccs)))
    if opts.include_outpatient:
        for claim in claims:
            if (
                claim.beneficiary_id == event.stay.beneficiary_id
                and claim.claim_type in ("outpatient", "ed")
                and horizon <= claim.admit_date < index_admit
            ):
                indices = _claim_indices(claim, ccs)
                if indices:
                    keyed.append((claim.admit_date - index_admit, claim.claim_id, indices))
    keyed.sort(key=lambda item: (item[0], item[1]))
    steps = [SequenceStep(day_offset=offset, indices=indices) for offset, _, indices in keyed]
    if not opts.exclude_index_step:
        steps.append(SequenceStep(day_offset=0, indices=_stay_indices(event.stay, ccs)))
    if not steps:
        raise ValidationError(f"event {event.event_id}: no visits left to build a sequence from")
    return steps


def _one_hot(value: str, levels: tuple[str, ...]) -> list[float]:
    vec = [0.0] * (len(levels) + 1)
    try:
        vec[levels.index(value)] = 1.0
    except ValueError:
        vec[-1] = 1.0
    return vec


def _z_age_band(age: int) -> str:
    if age < 65:
        return "<65"
    if age >= 85:
        return "85+"
    low = (age // 5) * 5
    return f"{low}-{low + 4}"


def _pooled_dx_codes(event: IndexEvent, claims: list[ClaimRecord], lookback_days: int) -> set[str]:
    admit = event.stay.admit_date
    codes = set(event.stay.all_dx)
    for claim in claims:
        if claim.beneficiary_id == event.stay.beneficiary_id and admit - lookback_days <= claim.admit_date <= admit:
            codes.update(claim.dx_codes)
    return codes


def build_domain_vector(
    event: IndexEvent,
    beneficiary: Beneficiary,
    claims: list[ClaimRecord],
    stays: list[InpatientStay],
    bundle: KnowledgeBundle,
    lookback_days: int = 365,
) -> tuple[list[float], list[str]]:
    """The hand-crafted vector z and its positionally matched feature names.

    Utilization counts cover the 12 months before the index admission;
    comorbidity pools diagnosis codes over that window plus the index stay.
    Unknown categorical values land in each feature's reserved (other) slot.
    """
    stay = event.stay
    ccs = bundle.ccs
    admit = stay.admit_date
    window_start = admit - lookback_days

    n_inpatient = sum(
        1
        for s in stays
        if s.beneficiary_id == stay.beneficiary_id and window_start <= s.admit_date <= admit - 1
    )
    n_outpatient = 0
    n_ed = 0
    for claim in claims:
        if claim.beneficiary_id == stay.beneficiary_id and window_start <= claim.admit_date <= admit - 1:
            if claim.claim_type == "outpatient":
                n_outpatient += 1
            elif claim.claim_type == "ed":
                n_ed += 1
    charlson = charlson_index(_pooled_dx_codes(event, claims, lookback_days), ccs, bundle.charlson_weights)
    dx_cats = {ccs.dx_category(c) for c in stay.all_dx}
    proc_cats = {ccs.proc_category(p) for p in stay.all_proc}
    flags = hac_flags(dx_cats, proc_cats, bundle.hac_rules)

    raw: dict[str, object] = {
        "age_range": _z_age_band(event.age),
        "gender": beneficiary.gender,
        "race": beneficiary.race,
        "dual_eligible": beneficiary.dual_eligible,
        "medicare_status": beneficiary.medicare_status,
        "length_of_stay": float(stay.los),
        "admission_type": stay.admission_type,
        "admission_source": stay.admission_source,
        "discharge_disposition": stay.discharge_disposition,
        "drg": stay.drg,
        "discharge_dx_ccs": ccs.dx_category(stay.principal_dx),
        "n_dx_codes_index": float(len(stay.all_dx)),
        "inpatient_admissions_12m": float(n_inpatient),
        "outpatient_visits_12m": float(n_outpatient),
        "ed_visits_12m": float(n_ed),
        "charlson_index": float(charlson),
        "hac_flags": flags,
    }

    values: list[float] = []
    names: list[str] = []
    for feature in bundle.domain_spec:
        if feature.name not in raw:
            raise ValidationError(f"domain spec references unknown feature {feature.name!r}")
        value = raw[feature.name]
        if feature.encoding == "numeric":
            values.append(float(value))
            names.append(feature.name)
        elif feature.encoding == "binary":
            values.append(1.0 if value else 0.0)
            names.append(feature.name)
        elif feature.encoding == "one_hot":
            values.extend(_one_hot(str(value), feature.levels))
            names.extend([f"{feature.name}={level}" for level in feature.levels] + [f"{feature.name}=(other)"])
        elif feature.encoding == "one_hot_dx_ccs":
            vec = [0.0] * ccs.n_dx_columns
            vec[int(value)] = 1.0
            values.extend(vec)
            names.extend(
                [f"{feature.name}={cat}" for cat in range(ccs.n_dx)] + [f"{feature.name}=(other)"]
            )
        elif feature.encoding == "flags":
            values.extend(float(f) for f in value)
            names.extend(f"{feature.name}[{rule.name}]" for rule in bundle.hac_rules)
        else:
            raise ValidationError(f"feature {feature.name!r}: unknown encoding {feature.encoding!r}")
    return values, names


def charlson_band(charlson: int) -> str:
    if charlson <= 2:
        return "0-2"
    if charlson <= 5:
        return "3-5"
    return "6+"


def featurize_events(
    events: list[IndexEvent],
    beneficiaries: dict[str, Beneficiary],
    claims: list[ClaimRecord],
    stays: list[InpatientStay],
    bundle: KnowledgeBundle,
    opts: SequenceOptions = SequenceOptions(),
) -> tuple[list[PatientSequence], list[str]]:
    """Builds sequences and z for every eligible event, with subgroup
    attributes attached for downstream reporting."""
    claims_by_ben: dict[str, list[ClaimRecord]] = {}
    for claim in claims:
        claims_by_ben.setdefault(claim.beneficiary_id, []).append(claim)
    stays_by_ben: dict[str, list[InpatientStay]] = {}
    for stay in stays:
        stays_by_ben.setdefault(stay.beneficiary_id, []).append(stay)

    sequences: list[PatientSequence] = []
    z_names: list[str] = []
    for event in events:
        if not event.eligible:
            continue
        bid = event.stay.beneficiary_id
        ben = beneficiaries[bid]
        ben_claims = claims_by_ben.get(bid, [])
        ben_stays = stays_by_ben.get(bid, [])
        steps = build_sequence(event, ben_claims, ben_stays, bundle.ccs, opts)
        z, names = build_domain_vector(event, ben, ben_claims, ben_stays, bundle)
        if z_names and names != z_names:
            raise ValidationError("domain vector layout changed between events")
        z_names = names
        charlson = z[names.index("charlson_index")]
        subgroup = {
            "age_range": age_band(event.age),
            "gender": ben.gender,
            "race": ben.race,
            "medicare_status": ben.medicare_status,
            "charlson_band": charlson_band(int(charlson)),
            "proc_ccs": tuple(sorted({bundle.ccs.proc_category(p) for p in event.stay.all_proc})),
        }
        sequences.append(
            PatientSequence(
                event_id=event.event_id,
                beneficiary_id=bid,
                steps=steps,
                z=z,
                readmit_label=bool(event.readmit_label),
                mortality_label=bool(event.mortality_label),
                mortality_excluded=event.mortality_exclusion is not None,
                subgroup=subgroup,
            )
        )
    return sequences, z_names
