//! Model files: network, LDA and PLDA parameters in the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::TensorFile;
use crate::backend::{LdaModel, PldaModel};
use crate::embedder::{LossConfig, Network, Params};
use crate::error::{Error, Result};
use crate::netspec::{parse_netspec, render_netspec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    netspec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<LossConfig>,
}

impl Header {
    fn plain(kind: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            feat_dim: None,
            netspec: None,
            loss: None,
        }
    }

    fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot encode model header: {e}")))
    }
}

fn open(path: &Path, kind: &str) -> Result<(TensorFile, Header)> {
    let file = TensorFile::read(path)?;
    let header: Header =
        toml::from_str(&file.header).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("format version {} unsupported (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    if header.kind != kind {
        return Err(Error::format(path, format!("holds a `{}` model, expected `{kind}`", header.kind)));
    }
    Ok((file, header))
}

pub fn save_network(path: &Path, net: &Network, loss: &LossConfig) -> Result<()> {
    let header = Header {
        feat_dim: Some(net.plan.feat_dim),
        netspec: Some(render_netspec(&net.spec)),
        loss: Some(*loss),
        ..Header::plain("embedder")
    };
    let mut file = TensorFile::new(header.render()?);
    for (name, t) in net.params.iter() {
        file.insert(name, t.clone());
    }
    file.write(path)
}

pub fn load_network(path: &Path) -> Result<(Network, LossConfig)> {
    let (file, header) = open(path, "embedder")?;
    let missing = |what: &str| Error::format(path, format!("header lacks `{what}`"));
    let spec = parse_netspec(header.netspec.as_deref().ok_or_else(|| missing("netspec"))?)?;
    let feat_dim = header.feat_dim.ok_or_else(|| missing("feat_dim"))?;
    let mut params = Params::new();
    for (name, t) in file.tensors {
        params.insert(name, t);
    }
    let net = Network::new(spec, feat_dim, params)?;
    Ok((net, header.loss.unwrap_or_default()))
}

pub fn save_lda(path: &Path, m: &LdaModel) -> Result<()> {
    let mut file = TensorFile::new(Header::plain("lda").render()?);
    file.insert("projection", m.projection.clone());
    file.insert_vector("mean", &m.mean);
    file.insert_vector("eigenvalues", &m.eigenvalues);
    file.write(path)
}

pub fn load_lda(path: &Path) -> Result<LdaModel> {
    let (file, _) = open(path, "lda")?;
    let m = LdaModel {
        projection: file.get("projection", path)?.clone(),
        mean: file.get_vector("mean", path)?,
        eigenvalues: file.get_vector("eigenvalues", path)?,
    };
    if m.mean.len() != m.in_dim() || m.eigenvalues.len() != m.out_dim() {
        return Err(Error::format(path, "LDA tensor shapes disagree"));
    }
    Ok(m)
}

pub fn save_plda(path: &Path, m: &PldaModel) -> Result<()> {
    let mut file = TensorFile::new(Header::plain("plda").render()?);
    file.insert_vector("mean", &m.mean);
    file.insert("between", m.between.clone());
    file.insert("within", m.within.clone());
    file.write(path)
}

pub fn load_plda(path: &Path) -> Result<PldaModel> {
    let (file, _) = open(path, "plda")?;
    let m = PldaModel {
        mean: file.get_vector("mean", path)?,
        between: file.get("between", path)?.clone(),
        within: file.get("within", path)?.clone(),
    };
    let d = m.mean.len();
    if m.between.shape() != (d, d) || m.within.shape() != (d, d) {
        return Err(Error::format(path, "PLDA tensor shapes disagree"));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn network_round_trip_preserves_f32_params() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.bin");
        let spec = builtin("etdnn").unwrap().scaled(1.0 / 64.0).with_classes("xvector", 3);
        let net = Network::init(spec, 5, 1).unwrap();
        save_network(&p, &net, &LossConfig::softmax()).unwrap();
        let (back, loss) = load_network(&p).unwrap();
        assert_eq!(loss, LossConfig::softmax());
        assert_eq!(back.spec, net.spec);
        for (name, t) in net.params.iter() {
            let r = back.params.tensor(name);
            assert!(t.iter().zip(r.iter()).all(|(a, b)| (*a as f32) as f64 == *b));
        }
    }

    #[test]
    fn kind_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plda.bin");
        let m = PldaModel {
            mean: DVector::zeros(2),
            between: DMatrix::identity(2, 2),
            within: DMatrix::identity(2, 2) * 0.5,
        };
        save_plda(&p, &m).unwrap();
        assert_eq!(load_plda(&p).unwrap(), m);
        assert!(matches!(load_lda(&p), Err(Error::Format { .. })));
    }
}
