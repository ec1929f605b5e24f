//! Attention matrices as CSV and SVG.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::contrastive::joint_forward;
use crate::error::Result;
use crate::model::transformer::{shift_right, AttentionRecord, Dropout};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Conventional attention of every head plus, for contrastive models, the
/// opponent weights, for a target decoded or given in advance. Rows cover
/// the target tokens and the closing EOS.
pub fn capture<S: Scalar>(
    model: &Model<S>,
    source: &[usize],
    target: &[usize],
) -> Result<(AttentionRecord<S>, Option<Tensor<S>>)> {
    let mut tape = Tape::with_params(&model.params);
    let (mut a, mut b) = (Dropout::off(), Dropout::off());
    let fwd = joint_forward(&mut tape, model, source, &shift_right(target), &mut a, &mut b, true)?;
    let record = AttentionRecord::capture(&tape, model, &fwd.decoder, &fwd.encoded.pad);
    let alpha_o = fwd.opponent.map(|o| tape.tensor(o.alpha_o));
    Ok((record, alpha_o))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header row of source tokens, then one row per target token.
pub fn attention_csv<S: Scalar>(weights: &Tensor<S>, src: &[String], tgt: &[String]) -> String {
    let mut out = String::from("target\\source");
    for s in src {
        write!(out, ",{}", csv_field(s)).unwrap();
    }
    out.push('\n');
    for (t, label) in tgt.iter().enumerate() {
        out.push_str(&csv_field(label));
        for w in weights.row(t) {
            write!(out, ",{}", w.as_f64()).unwrap();
        }
        out.push('\n');
    }
    out
}

const CELL: usize = 28;
const MARGIN: usize = 90;

/// Grey-scale grid, one `rect.cell` per weight, darker is larger.
pub fn attention_svg<S: Scalar>(weights: &Tensor<S>, src: &[String], tgt: &[String], title: &str) -> String {
    let (rows, cols) = (weights.rows(), weights.cols());
    let (w, h) = (MARGIN + cols * CELL + 10, MARGIN + rows * CELL + 10);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    writeln!(out, "<title>{}</title>", xml_escape(title)).unwrap();
    for (c, label) in src.iter().enumerate() {
        let x = MARGIN + c * CELL + CELL / 2;
        writeln!(
            out,
            "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-60 {x} {})\">{}</text>",
            MARGIN - 6,
            MARGIN - 6,
            xml_escape(label)
        )
        .unwrap();
    }
    for (r, label) in tgt.iter().enumerate() {
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN - 6,
            MARGIN + r * CELL + CELL / 2 + 4,
            xml_escape(label)
        )
        .unwrap();
    }
    for r in 0..rows {
        for c in 0..cols {
            let v = weights.at(r, c).as_f64().clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            writeln!(
                out,
                "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},{shade})\"><title>{v:.4}</title></rect>",
                MARGIN + c * CELL,
                MARGIN + r * CELL
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn svg_has_one_cell_per_weight() {
        let w = Tensor::<f64>::from_rows(&[&[0.2, 0.8, 0.0], &[1.0, 0.0, 0.0]]).unwrap();
        let svg = attention_svg(&w, &labels(3, "s"), &labels(2, "t"), "head");
        assert_eq!(svg.matches("class=\"cell\"").count(), 6);
    }

    #[test]
    fn csv_layout() {
        let w = Tensor::<f64>::from_rows(&[&[0.25, 0.75]]).unwrap();
        let csv = attention_csv(&w, &["a".into(), "b,c".into()], &["</s>".into()]);
        assert_eq!(csv, "target\\source,a,\"b,c\"\n</s>,0.25,0.75\n");
    }
}
