use std::fmt::Write as _;

use super::{SubtitleCue, SubtitleTrack, TimeSpan};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSrt {
    pub track: SubtitleTrack,
    /// Set when the file listed cues out of start-time order and they were
    /// sorted.
    pub reordered: bool,
}

fn fail(line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Srt {
        line,
        msg: msg.into(),
    }
}

/// `HH:MM:SS,mmm` (a `.` separator is also accepted) to whole milliseconds.
fn parse_timestamp(s: &str, line: usize) -> Result<u64> {
    let bad = || fail(line, format!("malformed timestamp `{s}`"));
    let (hms, ms) = s.split_once([',', '.']).ok_or_else(bad)?;
    let mut parts = hms.split(':');
    let (h, m, sec) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(m), Some(sec), None) => (h, m, sec),
        _ => return Err(bad()),
    };
    let num = |x: &str, width: Option<usize>| -> Result<u64> {
        if x.is_empty() || !x.bytes().all(|b| b.is_ascii_digit()) || width.is_some_and(|w| x.len() != w) {
            return Err(bad());
        }
        x.parse().map_err(|_| bad())
    };
    let (h, m, sec, ms) = (num(h, None)?, num(m, Some(2))?, num(sec, Some(2))?, num(ms, Some(3))?);
    if m >= 60 || sec >= 60 {
        return Err(bad());
    }
    Ok(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

fn format_timestamp(s: f64) -> String {
    let total = (s * 1000.0).round() as u64;
    let (ms, rest) = (total % 1000, total / 1000);
    format!("{:02}:{:02}:{:02},{:03}", rest / 3600, rest / 60 % 60, rest % 60, ms)
}

/// Parses the SRT subset: numbered blocks of a timing line and one or more
/// text lines, separated by blank lines. Line numbers in errors are 1-based.
pub fn parse_srt(bytes: &[u8]) -> Result<ParsedSrt> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        fail(line, "invalid UTF-8")
    })?;
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();

    let mut cues: Vec<(u64, u64, String)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let index_line = i + 1;
        if lines[i].trim().parse::<u64>().is_err() {
            return Err(fail(index_line, format!("expected cue number, found `{}`", lines[i].trim())));
        }
        i += 1;
        let timing_line = i + 1;
        let timing = lines
            .get(i)
            .filter(|l| !l.trim().is_empty())
            .ok_or_else(|| fail(timing_line, "missing timing line"))?;
        let (a, b) = timing
            .split_once("-->")
            .ok_or_else(|| fail(timing_line, format!("expected `start --> end`, found `{}`", timing.trim())))?;
        let start = parse_timestamp(a.trim(), timing_line)?;
        let end_tok = b.split_whitespace().next().unwrap_or("");
        let end = parse_timestamp(end_tok, timing_line)?;
        if end <= start {
            return Err(fail(timing_line, "cue ends before it starts"));
        }
        i += 1;
        let mut text_lines = Vec::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            text_lines.push(lines[i].trim());
            i += 1;
        }
        if text_lines.is_empty() {
            return Err(fail(timing_line + 1, "cue has no text"));
        }
        cues.push((start, end, text_lines.join(" ")));
    }
    if cues.is_empty() {
        return Err(fail(1, "file contains no cues"));
    }
    let reordered = cues.windows(2).any(|w| w[0].0 > w[1].0);
    if reordered {
        // Stable, so cues sharing a start time keep file order.
        cues.sort_by_key(|c| c.0);
    }
    let track = SubtitleTrack::new(
        cues.into_iter()
            .enumerate()
            .map(|(i, (s, e, text))| {
                Ok(SubtitleCue {
                    index: i + 1,
                    span: TimeSpan::new(s as f64 / 1000.0, e as f64 / 1000.0)?,
                    text,
                })
            })
            .collect::<Result<_>>()?,
    )?;
    Ok(ParsedSrt { track, reordered })
}

/// Serializes a track at millisecond precision.
pub fn write_srt(track: &SubtitleTrack) -> String {
    let mut out = String::new();
    for c in track.cues() {
        let _ = write!(
            out,
            "{}\n{} --> {}\n{}\n\n",
            c.index,
            format_timestamp(c.span.start_s),
            format_timestamp(c.span.end_s),
            c.text
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cue() {
        let p = parse_srt(b"1\n00:00:14,910 --> 00:00:19,210\nhello world\n").unwrap();
        assert!(!p.reordered);
        let c = &p.track.cues()[0];
        assert_eq!((c.index, c.span.start_s, c.span.end_s), (1, 14.910, 19.210));
        assert_eq!(c.text, "hello world");
    }

    #[test]
    fn two_blocks_bom_crlf_multiline() {
        let src = "\u{feff}1\r\n00:00:01,000 --> 00:00:02,500\r\nfirst\r\n  line two \r\n\r\n2\r\n01:00:00,000 --> 01:00:01,001\r\nsecond\r\n";
        let p = parse_srt(src.as_bytes()).unwrap();
        let idx: Vec<_> = p.track.cues().iter().map(|c| c.index).collect();
        assert_eq!(idx, [1, 2]);
        assert_eq!(p.track.cues()[0].text, "first line two");
        assert_eq!(p.track.cues()[1].span.start_s, 3600.0);
        assert_eq!(p.track.cues()[1].span.end_s, 3601.001);
    }

    #[test]
    fn missing_arrow_names_line() {
        let src = "1\n00:00:01,000 --> 00:00:02,000\na\n\n2\n00:00:03,000 00:00:04,000\nb\n";
        match parse_srt(src.as_bytes()).unwrap_err() {
            CoreError::Srt { line, .. } => assert_eq!(line, 6),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn malformed_timestamp_names_line() {
        let src = "1\n00:00:1,000 --> 00:00:02,000\na\n";
        match parse_srt(src.as_bytes()).unwrap_err() {
            CoreError::Srt { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("timestamp"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(parse_srt(b"").unwrap_err(), CoreError::Srt { .. }));
        assert!(matches!(parse_srt(b"\xEF\xBB\xBF \n\n").unwrap_err(), CoreError::Srt { .. }));
    }

    #[test]
    fn out_of_order_cues_sorted_with_flag() {
        let src = "1\n00:00:05,000 --> 00:00:06,000\nlate\n\n2\n00:00:01,000 --> 00:00:02,000\nearly\n";
        let p = parse_srt(src.as_bytes()).unwrap();
        assert!(p.reordered);
        let texts: Vec<_> = p.track.cues().iter().map(|c| (c.index, c.text.as_str())).collect();
        assert_eq!(texts, [(1, "early"), (2, "late")]);
    }

    #[test]
    fn timestamp_formatting() {
        assert_eq!(format_timestamp(3723.004), "01:02:03,004");
        assert_eq!(format_timestamp(0.0), "00:00:00,000");
    }
}
