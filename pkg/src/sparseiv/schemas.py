"""JSON schemas for CLI inputs and reports (version 1, additive evolution only)."""

REPORT_SCHEMA_ID = "sparseiv.report/v1"
REGION_SCHEMA_ID = "sparseiv.region/v1"
TABLE_SCHEMA_ID = "sparseiv.table/v1"

_num = {"type": ["number", "null"]}
_nums = {"type": "array", "items": _num}

ROLES_SCHEMA = {
    "type": "object",
    "required": ["outcome", "endogenous", "instruments"],
    "properties": {
        "outcome": {"type": "string"},
        "endogenous": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "exogenous": {"type": "array", "items": {"type": "string"}},
        "controls": {"type": "array", "items": {"type": "string"}},
        "instruments": {
            "oneOf": [
                {"type": "array", "items": {"type": "string"}, "minItems": 1},
                {
                    "type": "object",
                    "required": ["pattern"],
                    "properties": {"pattern": {"type": "string"}},
                    "additionalProperties": False,
                },
            ]
        },
        "intercept": {"type": "boolean"},
    },
    "additionalProperties": False,
}

SIM_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["n"],
    "properties": {
        "n": {"type": "integer", "minimum": 2},
        "p": {"type": "integer", "minimum": 1},
        "design": {"enum": ["cutoff", "exponential"]},
        "s": {"type": "integer", "minimum": 1},
        "mu2": {"type": "number", "minimum": 0},
        "fstar": {"type": "number", "exclusiveMinimum": 0},
        "corr_ev": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
        "sigma2_e": {"type": "number", "exclusiveMinimum": 0},
        "sigma2_z": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number"},
        "invalid_shift": {"type": "number"},
        "estimators": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "power_estimators": {"type": "array", "items": {"type": "string"}},
        "estimation": {
            "type": "object",
            "properties": {
                "c": {"type": "number", "exclusiveMinimum": 1},
                "gamma": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "K": {"type": "integer", "minimum": 1},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "intercept": {"type": "boolean"},
                "noselect_policy": {"enum": ["supscore", "infinite-ci"]},
                "pca_components": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "oneOf": [{"required": ["mu2"]}, {"required": ["fstar"]}],
    "additionalProperties": False,
}

_region = {
    "type": "object",
    "required": ["grid", "stats", "accepted", "critical", "level", "touches_boundary"],
    "properties": {
        "grid": _nums,
        "stats": _nums,
        "accepted": {"type": "array", "items": {"type": "boolean"}},
        "accepted_points": _nums,
        "near_boundary": {"type": "array", "items": {"type": "boolean"}},
        "critical": _num,
        "level": _num,
        "touches_boundary": {"type": "boolean"},
        "parameter": {"type": "string"},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "command", "settings", "estimates", "first_stage", "weak_id_route", "null_reasons"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "command": {"const": "fit"},
        "settings": {
            "type": "object",
            "required": ["method", "c", "gamma", "gamma_rule", "K", "vcov", "n", "p"],
        },
        "estimates": {
            "type": "object",
            "required": ["names", "alpha", "se", "vcov", "mode"],
            "properties": {
                "names": {"type": "array", "items": {"type": "string"}},
                "alpha": _nums,
                "se": _nums,
                "vcov": {"type": "array", "items": _nums},
                "mode": {"enum": ["hetero", "homo"]},
            },
        },
        "first_stage": {
            "type": "object",
            "required": ["lambda", "equations", "dropped"],
            "properties": {
                "lambda": _num,
                "equations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["endogenous", "selected", "iterations", "empty"],
                    },
                },
            },
        },
        "weak_id_route": {"type": "boolean"},
        "region": {"oneOf": [{"type": "null"}, _region]},
        "diagnostics": {"type": ["object", "null"]},
        "spec_test": {"type": ["object", "null"]},
        "split_sample": {"type": ["object", "null"]},
        "notes": {"type": "array", "items": {"type": "string"}},
        "null_reasons": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}

REGION_SCHEMA = {
    "type": "object",
    "required": ["schema", "command", "region", "settings", "null_reasons"],
    "properties": {
        "schema": {"const": REGION_SCHEMA_ID},
        "command": {"const": "region"},
        "region": _region,
        "settings": {"type": "object"},
        "null_reasons": {"type": "object"},
    },
}

TABLE_SCHEMA = {
    "type": "object",
    "required": ["schema", "spec", "base_seed", "R", "rows"],
    "properties": {
        "schema": {"const": TABLE_SCHEMA_ID},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["estimator", "R", "med_bias", "mad", "rp05", "rmse", "n0", "failed"],
            },
        },
    },
}
