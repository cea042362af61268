/// Right-aligned plain-text table.
pub(crate) fn render(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&mut headers.iter().copied());
    out.push_str(&line(&mut widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str)));
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

/// Integers without a trailing `.0`; everything else in shortest form.
pub(crate) fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e16 {
        format!("{}", v as i128)
    } else {
        format!("{v}")
    }
}

/// Bytes in decimal gigabytes with two decimals.
pub(crate) fn gb(v: f64) -> String {
    format!("{:.2} GB", v / 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligns_columns() {
        let t = render(&["a", "bb"], &[vec!["100".into(), "x".into()]]);
        assert_eq!(t, "  a  bb\n---  --\n100   x\n");
    }

    #[test]
    fn number_forms() {
        assert_eq!(num(524288.0), "524288");
        assert_eq!(num(0.5), "0.5");
        assert_eq!(gb(12.5e9), "12.50 GB");
    }
}
