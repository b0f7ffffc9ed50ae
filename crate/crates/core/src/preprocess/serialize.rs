use crate::corpus::{Record, Schema};

use super::{SerializedPair, Stage, CLS, COL, SEP, VAL};

/// `[COL] attr_1 [VAL] val_1 ... [COL] attr_m [VAL] val_m`, whitespace-normalized.
pub fn serialize_fields(attributes: &[String], values: &[String]) -> String {
    let mut out: Vec<&str> = Vec::new();
    for (attr, value) in attributes.iter().zip(values) {
        out.push(COL);
        out.extend(attr.split_whitespace());
        out.push(VAL);
        out.extend(value.split_whitespace());
    }
    out.join(" ")
}

pub fn serialize_record(record: &Record, schema: &Schema) -> String {
    serialize_fields(schema.attributes(), &record.values)
}

pub fn serialize_pair(pair_id: &str, left: &Record, right: &Record, schema: &Schema) -> SerializedPair {
    join_pair(pair_id, &serialize_record(left, schema), &serialize_record(right, schema))
}

/// `[CLS] left [SEP] right [SEP]` from two serialized records.
pub fn join_pair(pair_id: &str, l: &str, r: &str) -> SerializedPair {
    let parts: Vec<&str> = [CLS, l, SEP, r, SEP]
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect();
    SerializedPair {
        pair_id: pair_id.to_string(),
        text: parts.join(" "),
        stage: Stage::Serialized,
    }
}
