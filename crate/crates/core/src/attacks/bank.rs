//! The adversarial bank file format.
//!
//! Little-endian binary: header `magic "RASB", u32 version, u32 count,
//! u16 h, u16 w, u16 c, u16 n_classes`, then `count` records of
//! `h*w*c` f32 image values (channel-major, in `[0,1]`), u16 label,
//! u8 norm, u8 th, u8 optimizer tag, u8 victim tag. The sidecar file of
//! paired clean images shares the exact layout.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::AttackNorm;

pub const BANK_MAGIC: [u8; 4] = *b"RASB";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankHeader {
    pub version: u32,
    pub count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub n_classes: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankRecord {
    pub image: Vec<f32>,
    pub true_label: u16,
    pub norm: AttackNorm,
    pub th: u8,
    pub optimizer_tag: u8,
    pub victim_tag: u8,
}

/// The persistent collection of transferred adversarial samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBank {
    pub header: BankHeader,
    pub records: Vec<BankRecord>,
}

impl AdversarialBank {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.header.height as usize * self.header.width as usize * self.header.channels as usize
    }

    /// Replaces every record's image with the paired clean image, which is
    /// exactly the sidecar file's content.
    pub fn with_images(&self, images: &[Vec<f32>]) -> AdversarialBank {
        assert_eq!(images.len(), self.records.len());
        let records = self
            .records
            .iter()
            .zip(images)
            .map(|(r, img)| BankRecord {
                image: img.clone(),
                ..r.clone()
            })
            .collect();
        AdversarialBank {
            header: self.header,
            records,
        }
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io error on bank file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"RASB\"")]
    BadMagic,
    #[error("unsupported bank version {0}")]
    BadVersion(u32),
    #[error("truncated bank: record {0}")]
    Truncated(usize),
    #[error("record {index}: unknown norm tag {tag}")]
    UnknownNorm { index: usize, tag: u8 },
    #[error("record {index} violates its {norm:?} th={th} constraint")]
    ConstraintViolation {
        index: usize,
        norm: AttackNorm,
        th: u8,
    },
    #[error("bank and sidecar shapes disagree")]
    SidecarMismatch,
}

pub fn write_bank(bank: &AdversarialBank, path: &Path) -> Result<(), BankError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&BANK_MAGIC)?;
    out.write_all(&bank.header.version.to_le_bytes())?;
    out.write_all(&(bank.records.len() as u32).to_le_bytes())?;
    out.write_all(&bank.header.height.to_le_bytes())?;
    out.write_all(&bank.header.width.to_le_bytes())?;
    out.write_all(&bank.header.channels.to_le_bytes())?;
    out.write_all(&bank.header.n_classes.to_le_bytes())?;
    for record in &bank.records {
        for &v in &record.image {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&record.true_label.to_le_bytes())?;
        out.write_all(&[
            record.norm.tag(),
            record.th,
            record.optimizer_tag,
            record.victim_tag,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<AdversarialBank, BankError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if magic != BANK_MAGIC {
        return Err(BankError::BadMagic);
    }
    let version = read_u32(&mut reader)?;
    if version != BANK_VERSION {
        return Err(BankError::BadVersion(version));
    }
    let count = read_u32(&mut reader)?;
    let height = read_u16(&mut reader)?;
    let width = read_u16(&mut reader)?;
    let channels = read_u16(&mut reader)?;
    let n_classes = read_u16(&mut reader)?;
    let image_len = height as usize * width as usize * channels as usize;
    let mut records = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let mut image = vec![0f32; image_len];
        let mut buf = [0u8; 4];
        for v in image.iter_mut() {
            reader
                .read_exact(&mut buf)
                .map_err(|_| BankError::Truncated(index))?;
            *v = f32::from_le_bytes(buf);
        }
        let mut tail = [0u8; 6];
        reader
            .read_exact(&mut tail)
            .map_err(|_| BankError::Truncated(index))?;
        let true_label = u16::from_le_bytes([tail[0], tail[1]]);
        let norm = AttackNorm::from_tag(tail[2]).ok_or(BankError::UnknownNorm {
            index,
            tag: tail[2],
        })?;
        records.push(BankRecord {
            image,
            true_label,
            norm,
            th: tail[3],
            optimizer_tag: tail[4],
            victim_tag: tail[5],
        });
    }
    Ok(AdversarialBank {
        header: BankHeader {
            version,
            count,
            height,
            width,
            channels,
            n_classes,
        },
        records,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, BankError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, BankError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

/// Re-verifies every record's norm constraint against its paired clean
/// image from the sidecar. L0 counts pixels whose channels differ; Linf
/// checks the per-channel deviation bound.
pub fn verify_bank(bank: &AdversarialBank, clean: &AdversarialBank) -> Result<(), BankError> {
    if bank.header != clean.header || bank.records.len() != clean.records.len() {
        return Err(BankError::SidecarMismatch);
    }
    let h = bank.header.height as usize;
    let w = bank.header.width as usize;
    let c = bank.header.channels as usize;
    for (index, (rec, pair)) in bank.records.iter().zip(&clean.records).enumerate() {
        let violation = || BankError::ConstraintViolation {
            index,
            norm: rec.norm,
            th: rec.th,
        };
        match rec.norm {
            AttackNorm::L0 => {
                let mut changed = 0usize;
                for y in 0..h {
                    for x in 0..w {
                        let differs = (0..c)
                            .any(|ch| rec.image[(ch * h + y) * w + x] != pair.image[(ch * h + y) * w + x]);
                        changed += usize::from(differs);
                    }
                }
                if changed > rec.th as usize {
                    return Err(violation());
                }
            }
            AttackNorm::Linf => {
                let bound = rec.th as f32 / 255.0 + 1e-6;
                for (a, b) in rec.image.iter().zip(&pair.image) {
                    if (a - b).abs() > bound {
                        return Err(violation());
                    }
                }
            }
        }
    }
    Ok(())
}
