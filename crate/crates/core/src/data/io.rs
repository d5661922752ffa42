use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::model::{Image, ImageSize};

pub const SAMPLES_SCHEMA: &str = "switchkd-samples";
pub const SAMPLES_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    /// `[height, width, channels]`.
    shape: [usize; 3],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    image: ImageRecord,
    prompt: Vec<usize>,
    answer: Vec<usize>,
}

/// Writes a schema header line followed by one JSON object per sample.
pub fn persist_samples(samples: &[Sample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema: SAMPLES_SCHEMA.into(),
        version: SAMPLES_VERSION,
    };
    let mut write_line = |line: String| writeln!(out, "{line}").map_err(|e| Error::io(path, e));
    write_line(serde_json::to_string(&header)?)?;
    for s in samples {
        let size = s.image.size;
        let record = SampleRecord {
            id: s.id,
            image: ImageRecord {
                shape: [size.height, size.width, size.channels],
                values: s.image.data.clone(),
            },
            prompt: s.prompt.clone(),
            answer: s.answer.clone(),
        };
        write_line(serde_json::to_string(&record)?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`persist_samples`]; errors carry the 1-based line number.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing schema header".into())),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.schema != SAMPLES_SCHEMA || header.version != SAMPLES_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let [height, width, channels] = r.image.shape;
        let image = Image::new(
            ImageSize {
                height,
                width,
                channels,
            },
            r.image.values,
        )
        .map_err(|e| parse_err(line_no, e.to_string()))?;
        if r.answer.is_empty() {
            return Err(parse_err(line_no, "empty answer".into()));
        }
        samples.push(Sample {
            id: r.id,
            image,
            prompt: r.prompt,
            answer: r.answer,
        });
    }
    Ok(samples)
}
