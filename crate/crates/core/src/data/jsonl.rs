use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DialogueExample, Modality, Response};
use crate::encoders::ImageResponse;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    context: Vec<Vec<u32>>,
    #[serde(default)]
    gold_modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_response: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_response: Option<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    /// `[height, width, channels]`
    dims: [usize; 3],
    grid: Vec<f64>,
    labels: Vec<u32>,
}

impl From<&DialogueExample> for ExampleRecord {
    fn from(ex: &DialogueExample) -> Self {
        let (text_response, image_response) = match &ex.response {
            Response::Text(t) => (Some(t.clone()), None),
            Response::Image(img) => (
                None,
                Some(ImageRecord {
                    id: img.id.clone(),
                    dims: [img.height, img.width, img.channels],
                    grid: img.grid.clone(),
                    labels: img.labels.clone(),
                }),
            ),
        };
        ExampleRecord {
            id: ex.id.clone(),
            context: ex.context.clone(),
            gold_modality: Some(ex.gold_modality()),
            text_response,
            image_response,
            topic: ex.topic,
        }
    }
}

impl TryFrom<ExampleRecord> for DialogueExample {
    type Error = String;

    fn try_from(rec: ExampleRecord) -> Result<Self, String> {
        let modality = rec.gold_modality.ok_or("missing field `gold_modality`")?;
        let response = match (modality, rec.text_response, rec.image_response) {
            (Modality::Text, Some(t), None) => Response::Text(t),
            (Modality::Image, None, Some(img)) => {
                let [height, width, channels] = img.dims;
                if img.grid.len() != height * width * channels {
                    return Err(format!(
                        "image grid has {} values, dims {:?} need {}",
                        img.grid.len(),
                        img.dims,
                        height * width * channels
                    ));
                }
                Response::Image(ImageResponse {
                    id: img.id,
                    height,
                    width,
                    channels,
                    grid: img.grid,
                    labels: img.labels,
                })
            }
            (m, _, _) => {
                return Err(format!(
                    "gold_modality is {m} but the record does not hold exactly one {m} response"
                ))
            }
        };
        Ok(DialogueExample {
            id: rec.id,
            context: rec.context,
            response,
            topic: rec.topic,
        })
    }
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for ex in &dataset.examples {
        serde_json::to_writer(&mut out, &ExampleRecord::from(ex))?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

/// Parses newline-delimited records; `origin` labels errors.
pub fn read_jsonl<R: Read>(input: R, origin: &Path) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: ExampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        examples.push(DialogueExample::try_from(rec).map_err(parse_err)?);
    }
    Ok(Dataset::new(examples))
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(file, path)
}
