use std::path::Path;

use crate::error::{Error, Result};
use crate::rasae::model::{DecoderParams, Sae};
use crate::rasae::SaeConfig;
use crate::tensorio::{Container, SectionData};

fn f64_section(rows: usize, cols: usize, data: &[f64]) -> SectionData {
    SectionData::F64 {
        rows,
        cols,
        data: data.to_vec(),
    }
}

impl Sae {
    pub fn to_container(&self) -> Result<Container> {
        let (k, d) = (self.n_concepts(), self.input_dim());
        let mut c = Container::new();
        c.push(
            "config",
            SectionData::Bytes(
                serde_json::to_vec_pretty(&self.config).map_err(|e| Error::json("SAE config", e))?,
            ),
        );
        c.push("enc_w", f64_section(k, d, &self.enc_w));
        c.push("enc_b", f64_section(k, 1, &self.enc_b));
        match &self.decoder {
            DecoderParams::Free { atoms } => c.push("atoms", f64_section(k, d, atoms)),
            DecoderParams::Archetypal {
                logits,
                anchors,
                n_anchors,
                relaxation,
            } => {
                c.push("logits", f64_section(k, *n_anchors, logits));
                c.push("anchors", f64_section(*n_anchors, d, anchors));
                if let Some(r) = relaxation {
                    c.push("relaxation", f64_section(k, d, r));
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let config: SaeConfig = serde_json::from_slice(c.bytes("config")?)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        let vec = |name: &str| -> Result<Vec<f64>> { Ok(c.f64_matrix(name)?.2.to_vec()) };
        let decoder = if c.get("atoms").is_some() {
            DecoderParams::Free {
                atoms: vec("atoms")?,
            }
        } else {
            let (m, _, _) = c.f64_matrix("anchors")?;
            DecoderParams::Archetypal {
                logits: vec("logits")?,
                anchors: vec("anchors")?,
                n_anchors: m,
                relaxation: c.get("relaxation").map(|_| vec("relaxation")).transpose()?,
            }
        };
        let sae = Sae::from_parts(config, vec("enc_w")?, vec("enc_b")?, decoder)?;
        if sae.atoms().iter().chain(&sae.enc_w).chain(&sae.enc_b).any(|v| !v.is_finite()) {
            return Err(Error::Corruption(format!(
                "{}: model has non-finite parameters",
                path.display()
            )));
        }
        Ok(sae)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_container(&Container::read(path)?, path)
    }
}
