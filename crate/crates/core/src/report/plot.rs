use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{infer_open_close, io_err, ReportError};
use crate::cluster::Clustering;
use crate::profile::ProfileSet;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 44.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG line chart: one thin polyline per member and a heavy one for the
/// mean. The x axis runs over the hours of the day.
pub fn render_cluster_svg(members: &[&[f64]], mean: &[f64], title: &str) -> String {
    let n = mean.len().max(1);
    let y_max = members
        .iter()
        .flat_map(|m| m.iter())
        .chain(mean)
        .copied()
        .fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |j: usize| LEFT + plot_w * (j as f64 * 24.0 / n as f64) / 24.0;
    let y = |v: f64| TOP + plot_h * (1.0 - v / y_max);
    let points = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.2},{:.2}", x(j), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0) = (LEFT, TOP + plot_h);
    let _ = writeln!(svg, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/>"#,
        LEFT + plot_w
    );
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{TOP}"/>"#);
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<g font-family="sans-serif" font-size="11" text-anchor="middle">"#
    );
    for h in (0..=24).step_by(3) {
        let tx = LEFT + plot_w * h as f64 / 24.0;
        let _ = writeln!(svg, r#"<text x="{tx:.2}" y="{:.2}">{h}</text>"#, y0 + 16.0);
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}">hour of day</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(
        svg,
        r##"<g fill="none" stroke="#8aa4c8" stroke-width="0.8" stroke-opacity="0.6">"##
    );
    for m in members {
        let _ = writeln!(svg, r#"<polyline points="{}"/>"#, points(m));
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#c0392b" stroke-width="3" points="{}"/>"##,
        points(mean)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes an SVG of every member profile of `cluster` with the cluster mean
/// emphasized. The title carries the filter label and the open/close label.
pub fn emit_cluster_plot(
    profiles: &ProfileSet,
    clustering: &Clustering,
    cluster: usize,
    path: &Path,
) -> Result<(), ReportError> {
    let members: Vec<&[f64]> = profiles
        .profiles
        .iter()
        .filter(|p| clustering.cluster_of(&p.account_id) == Some(cluster))
        .map(|p| p.values.as_slice())
        .collect();
    if members.is_empty() {
        return Err(ReportError::EmptyCluster(cluster));
    }
    let n = profiles.n();
    let mut mean = vec![0.0; n];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(m.iter()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= members.len() as f64);

    let hours = match infer_open_close(&mean, 0.5) {
        Ok(o) => o.label,
        Err(ReportError::AllZeroProfile) => "no load".into(),
        Err(e) => return Err(e),
    };
    let label = if clustering.filter_label.is_empty() {
        &profiles.label
    } else {
        &clustering.filter_label
    };
    let title = format!(
        "{label} cluster {cluster} ({} accounts): {hours}",
        members.len()
    );
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, render_cluster_svg(&members, &mean, &title)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::tests::{clustering, profiles};

    #[test]
    fn one_polyline_per_member_plus_mean() {
        let p = profiles(&[
            (
                "a",
                (0..24).map(|h| if h >= 16 { 1.0 } else { 0.1 }).collect(),
            ),
            (
                "b",
                (0..24).map(|h| if h >= 16 { 0.9 } else { 0.2 }).collect(),
            ),
            ("c", vec![0.5; 24]),
        ]);
        let c = clustering(&[("a", 0), ("b", 0), ("c", 1)], vec![vec![0.0; 24]; 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c0.svg");
        emit_cluster_plot(&p, &c, 0, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("open at 16 for 8 hours"));
        assert!(svg.contains("hour of day"));
        assert!(matches!(
            emit_cluster_plot(&p, &c, 5, &path),
            Err(ReportError::EmptyCluster(5))
        ));
    }

    #[test]
    fn title_is_escaped() {
        let svg = render_cluster_svg(&[], &[0.0, 1.0], "a<b & c");
        assert!(svg.contains("a&lt;b &amp; c"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
