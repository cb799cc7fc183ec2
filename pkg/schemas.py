from marshmallow import (Schema, ValidationError, fields, pre_load, validate,
                         validates_schema)


class TensorDescriptorSchema(Schema):
    name = fields.Str(required=True, validate=validate.Length(min=1))
    shape = fields.List(fields.Int(validate=validate.Range(min=1)), required=True,
                        validate=validate.Length(min=1, max=2))
    dtype = fields.Str(required=True, validate=validate.OneOf(["f32"]))
    offset = fields.Int(required=True, validate=validate.Range(min=0))
    nbytes = fields.Int(required=True, validate=validate.Range(min=0))


class CheckpointManifestSchema(Schema):
    step = fields.Int(required=True, validate=validate.Range(min=0))
    tensors = fields.List(fields.Nested(TensorDescriptorSchema()), required=True)
    meta = fields.Dict(keys=fields.Str(), values=fields.Str(), load_default=dict)

    @validates_schema
    def check_layout(self, data, **kwargs):
        names = [t["name"] for t in data.get("tensors", [])]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValidationError(f"Duplicate tensor names: {duplicates}", "tensors")

        spans = sorted((t["offset"], t["offset"] + t["nbytes"], t["name"]) for t in data.get("tensors", []))
        for (_, end, left), (start, _, right) in zip(spans, spans[1:]):
            if start < end:
                raise ValidationError(f"Tensors {left} and {right} overlap in the blob.", "tensors")


class QuantSelectorSchema(Schema):
    include_patterns = fields.List(fields.Str(), load_default=lambda: ["*"])
    exclude_patterns = fields.List(fields.Str(), load_default=lambda: ["*embed*", "*norm*", "*bias*"])
    min_dims = fields.Int(load_default=2, validate=validate.Range(min=1, max=2))


# Schedules: one schema per kind, dispatched on "kind"
class CosineWarmupSchema(Schema):
    kind = fields.Str(load_default="cosine", validate=validate.Equal("cosine"))
    eta_max = fields.Float(load_default=6e-4, validate=validate.Range(min=0, min_inclusive=False))
    eta_min = fields.Float(load_default=6e-5, validate=validate.Range(min=0, min_inclusive=False))
    warmup_steps = fields.Int(load_default=1430, validate=validate.Range(min=0))
    total_steps = fields.Int(load_default=143000, validate=validate.Range(min=1))


class SGDRSchema(Schema):
    kind = fields.Str(load_default="sgdr", validate=validate.Equal("sgdr"))
    eta_max = fields.Float(load_default=6e-4, validate=validate.Range(min=0, min_inclusive=False))
    eta_min = fields.Float(load_default=6e-5, validate=validate.Range(min=0, min_inclusive=False))
    period = fields.Int(load_default=10000, validate=validate.Range(min=1))
    fork_step = fields.Int(load_default=0, validate=validate.Range(min=0))


class OLISchema(Schema):
    kind = fields.Str(load_default="oli", validate=validate.Equal("oli"))
    base = fields.Nested(CosineWarmupSchema(), required=True)
    bump_multiplier = fields.Float(load_default=5.0, validate=validate.Range(min=0, min_inclusive=False))
    bump_len = fields.Int(load_default=75, validate=validate.Range(min=0))
    cool_len = fields.Int(load_default=300, validate=validate.Range(min=0))
    fork_step = fields.Int(load_default=0, validate=validate.Range(min=0))

    @pre_load
    def default_base(self, data, **kwargs):
        return {"base": {}, **data}


class TinyLMConfigSchema(Schema):
    n_layers = fields.Int(load_default=2, validate=validate.Range(min=1))
    d_model = fields.Int(load_default=64, validate=validate.Range(min=1))
    n_heads = fields.Int(load_default=2, validate=validate.Range(min=1))
    d_ff = fields.Int(load_default=256, validate=validate.Range(min=1))
    vocab_size = fields.Int(load_default=256, validate=validate.Range(min=1))
    seq_len = fields.Int(load_default=128, validate=validate.Range(min=2))


OPEN_UNIT = validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False)


class AdamWConfigSchema(Schema):
    beta1 = fields.Float(load_default=0.9, validate=OPEN_UNIT)
    beta2 = fields.Float(load_default=0.95, validate=OPEN_UNIT)
    epsilon = fields.Float(load_default=1e-8, validate=validate.Range(min=0, min_inclusive=False))
    weight_decay = fields.Float(load_default=0.01, validate=validate.Range(min=0))


class CorpusConfigSchema(Schema):
    seed = fields.Int(load_default=1234)
    length = fields.Int(load_default=400000, validate=validate.Range(min=1))
    val_fraction = fields.Float(load_default=0.1, validate=OPEN_UNIT)


class RunConfigSchema(Schema):
    seed = fields.Int(load_default=0)
    total_steps = fields.Int(load_default=2000, validate=validate.Range(min=0))
    checkpoint_every = fields.Int(load_default=200, validate=validate.Range(min=1))
    batch_size = fields.Int(load_default=4, validate=validate.Range(min=1))
    schedule = fields.Dict(load_default=None, allow_none=True)  # validated by schedules.schedule_from_dict
    corpus = fields.Nested(CorpusConfigSchema(), required=True)
    model = fields.Nested(TinyLMConfigSchema(), required=True)
    optimizer = fields.Nested(AdamWConfigSchema(), required=True)

    @pre_load
    def default_sections(self, data, **kwargs):
        # Nested sections may be omitted; they then take every field default
        return {"corpus": {}, "model": {}, "optimizer": {}, **data}


class EvalSetHeaderSchema(Schema):
    n_batches = fields.Int(required=True, validate=validate.Range(min=1))
    rows = fields.Int(required=True, validate=validate.Range(min=1))
    seq_len = fields.Int(required=True, validate=validate.Range(min=2))
    vocab_size = fields.Int(required=True, validate=validate.Range(min=1))
    seed = fields.Int(required=True)
    corpus_id = fields.Str(required=True)


class GapRecordSchema(Schema):
    scheme = fields.Str()
    ppl_fp = fields.Float(required=True)
    ppl_q = fields.Float(required=True)
    gap_pct = fields.Float(required=True)


class TrajectoryPointSchema(Schema):
    step = fields.Int(required=True, validate=validate.Range(min=0))
    ppl_fp32 = fields.Float(required=True, allow_none=True)
    ppl_int4 = fields.Float(allow_none=True, load_default=None)
    gap_int4_pct = fields.Float(allow_none=True, load_default=None)
    ppl_int8 = fields.Float(allow_none=True, load_default=None)
    gap_int8_pct = fields.Float(allow_none=True, load_default=None)
    lr = fields.Float(allow_none=True, load_default=None)
    lr_frac = fields.Float(allow_none=True, load_default=None, validate=validate.Range(min=0, max=5))
    kurtosis = fields.Float(allow_none=True, load_default=None)
    phase = fields.Int(allow_none=True, load_default=None, validate=validate.OneOf([1, 2, 3]))
    status = fields.Str(load_default="ok", validate=validate.OneOf(["ok", "failed"]))

    @pre_load
    def blank_cells_to_none(self, data, **kwargs):
        # CSV leaves absent optional columns as empty cells
        return {k: (None if v == "" else v) for k, v in data.items()}

    @validates_schema
    def probed_rows_have_a_perplexity(self, data, **kwargs):
        if data.get("status", "ok") == "ok" and data.get("ppl_fp32") is None:
            raise ValidationError("ppl_fp32 is required unless the row failed", "ppl_fp32")


class PhaseSummarySchema(Schema):
    phase = fields.Int()
    n_rows = fields.Int()
    first_step = fields.Int(allow_none=True)
    last_step = fields.Int(allow_none=True)
    ppl_start = fields.Float(allow_none=True)
    ppl_end = fields.Float(allow_none=True)
    gap_mean = fields.Float(allow_none=True)
    gap_max = fields.Float(allow_none=True)


class PhaseReportSchema(Schema):
    boundary_12 = fields.Int(allow_none=True)
    boundary_23 = fields.Int(allow_none=True)
    min_ppl_step = fields.Int(allow_none=True)
    min_ppl_value = fields.Float(allow_none=True)
    stall_step = fields.Int(allow_none=True)
    partial = fields.Bool()
    reason = fields.Str(allow_none=True)
    phases = fields.List(fields.Nested(PhaseSummarySchema()))


class KurtosisResultSchema(Schema):
    excess_kurtosis = fields.Float()
    n = fields.Int()
    mean = fields.Float()
    variance = fields.Float()


class WelchResultSchema(Schema):
    t = fields.Float()
    df = fields.Float()
    p_two_sided = fields.Float()
    mean_a = fields.Float()
    mean_b = fields.Float()
    var_a = fields.Float()
    var_b = fields.Float()
    n_a = fields.Int()
    n_b = fields.Int()


class WinRecordSchema(Schema):
    wins = fields.Int()
    ties = fields.Int()
    total = fields.Int()


class PhaseGapSummarySchema(Schema):
    n_probes = fields.Int()
    mean_gap = fields.Float(allow_none=True)
    std_gap = fields.Float(allow_none=True)
    wins_vs_baseline = fields.Nested(WinRecordSchema(), allow_none=True)
    welch_vs_baseline = fields.Nested(WelchResultSchema(), allow_none=True)


class ConditionSummarySchema(Schema):
    name = fields.Str()
    kind = fields.Str()
    seeds = fields.List(fields.Int())
    failed_seeds = fields.List(fields.Int())
    final_step = fields.Int(allow_none=True)
    final_gaps = fields.List(fields.Float())
    mean_gap = fields.Float(allow_none=True)
    std_gap = fields.Float(allow_none=True)
    mean_ppl_fp32 = fields.Float(allow_none=True)
    wins_vs_baseline = fields.Nested(WinRecordSchema(), allow_none=True)
    welch_vs_baseline = fields.Nested(WelchResultSchema(), allow_none=True)
    cool_phase = fields.Nested(PhaseGapSummarySchema(), allow_none=True)
    bump_phase = fields.Nested(PhaseGapSummarySchema(), allow_none=True)


class ForkSummarySchema(Schema):
    base_checkpoint = fields.Str()
    fork_step = fields.Int()
    steps = fields.Int()
    baseline = fields.Str()
    bump_amplitude = fields.Dict(allow_none=True)
    conditions = fields.List(fields.Nested(ConditionSummarySchema()))


class CommandConfigSchema(Schema):
    subcommand = fields.Str(required=True, validate=validate.OneOf(
        ["probe", "audit", "phases", "schedule", "fork", "stats", "report", "train", "evalset"]))
    seed = fields.Int(allow_none=True)
    threads = fields.Int(allow_none=True)
    output = fields.Str(allow_none=True)
    format = fields.Str(validate=validate.OneOf(["csv", "json"]))
    params = fields.Dict(keys=fields.Str())
