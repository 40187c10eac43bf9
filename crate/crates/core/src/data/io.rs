//! Dataset CSV container and binary PGM export.
//!
//! Dataset layout:
//!
//! ```text
//! h,w,count,bias,min,max
//! 12,8,2,1.0e1,-1.0e1,2.4e2
//! <h·w pixel values>[,label]
//! ...
//! ```
//!
//! Floats are written with 17 significant digits so a load after save
//! reproduces every value exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, ImageGrid, PreprocessSpec};
use crate::error::{Error, Result};

const HEADER: [&str; 6] = ["h", "w", "count", "bias", "min", "max"];

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let csv_err = |e: csv::Error| Error::Contract(format!("writing dataset: {e}"));
    w.write_record(HEADER).map_err(csv_err)?;
    let p = &ds.preprocess;
    w.write_record([
        ds.height.to_string(),
        ds.width.to_string(),
        ds.len().to_string(),
        fmt_f64(p.bias),
        fmt_f64(p.post_bias_min),
        fmt_f64(p.post_bias_max),
    ])
    .map_err(csv_err)?;
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        let mut row: Vec<String> = img.pixels().iter().map(|v| fmt_f64(*v)).collect();
        if let Some(l) = label {
            row.push(l.clone());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Contract(format!("writing dataset: {e}")))?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, BufWriter::new(f))
}

fn parse_at<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what} {field:?}"),
    })
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = rdr.records();
    let mut next = |expect: &str| -> Result<Option<(usize, csv::StringRecord)>> {
        match records.next() {
            None => Ok(None),
            Some(Ok(r)) => Ok(Some((r.position().map_or(0, |p| p.line() as usize), r))),
            Some(Err(e)) => Err(Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: format!("{expect}: {e}"),
            }),
        }
    };

    let missing = |line| Error::Parse {
        line,
        message: "missing header".into(),
    };
    let (line, names) = next("header")?.ok_or_else(|| missing(1))?;
    if names.iter().map(str::trim).ne(HEADER) {
        return Err(Error::Parse {
            line,
            message: format!("expected header {:?}", HEADER.join(",")),
        });
    }
    let (line, meta) = next("header values")?.ok_or_else(|| missing(2))?;
    if meta.len() != HEADER.len() {
        return Err(Error::Parse {
            line,
            message: format!("header has {} fields, expected {}", meta.len(), HEADER.len()),
        });
    }
    let h: usize = parse_at(&meta[0], line, "height")?;
    let w: usize = parse_at(&meta[1], line, "width")?;
    let count: usize = parse_at(&meta[2], line, "count")?;
    let bias: f64 = parse_at(&meta[3], line, "bias")?;
    let lo: f64 = parse_at(&meta[4], line, "min")?;
    let hi: f64 = parse_at(&meta[5], line, "max")?;
    let preprocess = PreprocessSpec::new(bias, lo, hi).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;

    let d = h * w;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    while let Some((line, rec)) = next("image row")? {
        if rec.len() != d && rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                message: format!("row has {} fields, expected {d} pixels plus an optional label", rec.len()),
            });
        }
        let px = (0..d)
            .map(|i| parse_at::<f64>(&rec[i], line, "pixel"))
            .collect::<Result<Vec<_>>>()?;
        let img = ImageGrid::new(h, w, px).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        images.push(img);
        labels.push((rec.len() == d + 1).then(|| rec[d].to_string()));
    }
    if images.len() != count {
        return Err(Error::Parse {
            line: 2,
            message: format!("header declares {count} images, file has {}", images.len()),
        });
    }
    Dataset::new(h, w, images, labels, preprocess)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(f)
}

/// Binary greyscale PGM (`P5`, maxval 255), pixels rounded to nearest.
pub fn pgm_bytes(img: &ImageGrid) -> Result<Vec<u8>> {
    if let Some(i) = img.pixels().iter().position(|p| !(0.0..=255.0).contains(p)) {
        return Err(Error::Contract(format!(
            "pixel {i} = {} outside [0, 255]",
            img.pixels()[i]
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|p| p.round() as u8));
    Ok(out)
}

pub fn export_pgm(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = pgm_bytes(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PreprocessSpec {
        PreprocessSpec::new(10.0, -3.25, 241.0).unwrap()
    }

    fn roundtrip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        read_dataset(buf.as_slice()).unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(12, 8, vec![], vec![], spec()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
        assert_eq!(roundtrip(&ds), ds);
    }

    #[test]
    fn single_image_bit_exact() {
        let px: Vec<f64> = (0..6).map(|i| (i as f64 * 0.1).sin() * 255.0 / 7.0).collect();
        let img = ImageGrid::new(2, 3, px).unwrap();
        let ds = Dataset::new(2, 3, vec![img], vec![Some("muon".into())], spec()).unwrap();
        let back = roundtrip(&ds);
        for (a, b) in back.images[0].pixels().iter().zip(ds.images[0].pixels()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, ds);
    }

    #[test]
    fn unlabelled_rows() {
        let imgs = vec![ImageGrid::zeros(1, 2), ImageGrid::new(1, 2, vec![1.0, 2.0]).unwrap()];
        let ds = Dataset::new(1, 2, imgs, vec![None, Some("proton".into())], spec()).unwrap();
        assert_eq!(roundtrip(&ds), ds);
    }

    #[test]
    fn truncated_row_names_line() {
        let text = "h,w,count,bias,min,max\n1,3,2,10,0,20\n1,2,3\n4,5\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header() {
        let text = "h,w,n,bias,min,max\n1,1,0,10,0,20\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let text = "h,w,count,bias,min,max\n1,1,zero,10,0,20\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn pgm_single_black_pixel() {
        let img = ImageGrid::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(pgm_bytes(&img).unwrap(), b"P5\n1 1\n255\n\x00".to_vec());
    }

    #[test]
    fn pgm_white_and_dims() {
        let img = ImageGrid::new(3, 5, vec![255.0; 15]).unwrap();
        let bytes = pgm_bytes(&img).unwrap();
        let header = b"P5\n5 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|b| *b == 0xFF));
        assert_eq!(bytes.len(), header.len() + 15);
    }

    #[test]
    fn pgm_rounds_and_rejects() {
        let img = ImageGrid::new(1, 2, vec![1.49, 1.5]).unwrap();
        assert_eq!(&pgm_bytes(&img).unwrap()[11..], &[1, 2]);
        let bad = ImageGrid::new(1, 1, vec![255.5]).unwrap();
        assert!(matches!(pgm_bytes(&bad), Err(Error::Contract(_))));
    }
}
