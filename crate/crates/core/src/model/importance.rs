use super::{Model, ModelError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

/// Features ranked by the summed absolute parameters of the first layer:
/// for feature `p`, `sum_q |base[q,p]| + |spline[q,p]| * sum_j |coeff[q,p,j]|`.
/// Sorted by descending score; equal scores keep feature order.
pub fn feature_importance(model: &Model) -> Vec<(String, f64)> {
    let scores = model.first_layer().input_magnitudes();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|p| (model.feature_ids()[p].clone(), scores[p]))
        .collect()
}

/// Feature id to gene name lookup read from a `feature_id\tgene_name` TSV.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeneMapping {
    pub names: HashMap<String, String>,
}

pub fn parse_gene_mapping<R: Read>(reader: R) -> Result<GeneMapping, ModelError> {
    let malformed = |line: u64, message: String| ModelError::MalformedMapping { line, message };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| malformed(1, format!("missing column '{name}'")))
    };
    let fi = column("feature_id")?;
    let gi = column("gene_name")?;
    let mut names = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            malformed(e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let feature = record[fi].trim().to_string();
        let gene = record[gi].trim().to_string();
        if feature.is_empty() {
            return Err(malformed(line, "empty feature id".into()));
        }
        if let Some(prev) = names.get(&feature) {
            if prev != &gene {
                return Err(malformed(
                    line,
                    format!("feature '{feature}' maps to both '{prev}' and '{gene}'"),
                ));
            }
        }
        names.insert(feature, gene);
    }
    Ok(GeneMapping { names })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature_id: String,
    pub gene_name: String,
    pub score: f64,
}

/// Attaches gene names; features without one are labeled `unmapped`.
pub fn map_importance_to_genes(ranking: &[(String, f64)], mapping: &GeneMapping) -> Vec<ImportanceRow> {
    ranking
        .iter()
        .map(|(id, score)| ImportanceRow {
            feature_id: id.clone(),
            gene_name: mapping
                .names
                .get(id)
                .cloned()
                .unwrap_or_else(|| "unmapped".to_string()),
            score: *score,
        })
        .collect()
}

/// Six significant digits, `%g` style.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_importance_tsv<W: Write>(rows: &[ImportanceRow], writer: W) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "feature_id\tgene_name\tscore")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}", r.feature_id, r.gene_name, format_score(r.score))?;
    }
    w.flush()?;
    Ok(())
}
