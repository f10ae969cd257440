//! Binary and CSV persistence of value surfaces.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic           5 bytes  "MMRV1"
//! version         u16 length + UTF-8
//! config hash     u16 length + UTF-8
//! units           u8       0 = scaled, 1 = market
//! s_min, s_max    f64 f64
//! n_s, q_cap      u32 u32
//! dt              f64
//! n_t             u64
//! A kappa gamma sigma mu alpha   6 x f64  (solver coefficients)
//! boundary_mode   u8       0 = cap, 1 = zero2nd
//! tau             f64
//! v_tau_estimate  f64      NaN when unavailable
//! values          (2Q+1) * n_s f64, row-major in (q + Q, j)
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::lattice::{BoundaryMode, Lattice, ValueSurface};
use crate::model::{HjbParams, Units};

pub const MAGIC: &[u8; 5] = b"MMRV1";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every persisted artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Provenance {
            version: ARTIFACT_VERSION.to_string(),
            config_hash: config_hash.into(),
        }
    }

    /// Leading comment line for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# mrmm {} config_hash={}\n", self.version, self.config_hash)
    }
}

/// Everything a surface file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFile {
    pub provenance: Provenance,
    pub lattice: Lattice,
    pub params: HjbParams,
    pub surface: ValueSurface,
    pub v_tau_estimate: Option<f64>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non UTF-8 header string".into()))
}

pub fn write_surface<W: Write>(w: &mut W, file: &SurfaceFile) -> Result<()> {
    let SurfaceFile { provenance, lattice, params, surface, v_tau_estimate } = file;
    if surface.n_s != lattice.n_s || surface.q_cap != lattice.q_cap {
        return Err(Error::LatticeMismatch("surface does not fit its lattice".into()));
    }
    w.write_all(MAGIC)?;
    write_str(w, &provenance.version)?;
    write_str(w, &provenance.config_hash)?;
    w.write_u8(match params.units {
        Units::Scaled => 0,
        Units::Market => 1,
    })?;
    w.write_f64::<LittleEndian>(lattice.s_min)?;
    w.write_f64::<LittleEndian>(lattice.s_max)?;
    w.write_u32::<LittleEndian>(lattice.n_s as u32)?;
    w.write_u32::<LittleEndian>(lattice.q_cap as u32)?;
    w.write_f64::<LittleEndian>(lattice.dt)?;
    w.write_u64::<LittleEndian>(lattice.n_t as u64)?;
    for x in [params.a, params.kappa, params.gamma, params.sigma, params.mu, params.alpha] {
        w.write_f64::<LittleEndian>(x)?;
    }
    w.write_u8(surface.boundary_mode.code())?;
    w.write_f64::<LittleEndian>(surface.tau)?;
    w.write_f64::<LittleEndian>(v_tau_estimate.unwrap_or(f64::NAN))?;
    for &x in &surface.values {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_surface<R: Read>(r: &mut R) -> Result<SurfaceFile> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_str(r)?;
    let config_hash = read_str(r)?;
    let units = match r.read_u8()? {
        0 => Units::Scaled,
        1 => Units::Market,
        c => return Err(Error::Format(format!("unknown unit code {c}"))),
    };
    let s_min = r.read_f64::<LittleEndian>()?;
    let s_max = r.read_f64::<LittleEndian>()?;
    let n_s = r.read_u32::<LittleEndian>()? as usize;
    let q_cap = r.read_u32::<LittleEndian>()? as usize;
    let dt = r.read_f64::<LittleEndian>()?;
    let n_t = r.read_u64::<LittleEndian>()? as usize;
    let mut coef = [0.0; 6];
    for c in coef.iter_mut() {
        *c = r.read_f64::<LittleEndian>()?;
    }
    let boundary_mode = BoundaryMode::from_code(r.read_u8()?)
        .ok_or_else(|| Error::Format("unknown boundary mode".into()))?;
    let tau = r.read_f64::<LittleEndian>()?;
    let v_tau = r.read_f64::<LittleEndian>()?;
    if n_s < 3 || q_cap < 1 {
        return Err(Error::Format(format!("implausible lattice n_s={n_s} q_cap={q_cap}")));
    }
    let len = (2 * q_cap + 1) * n_s;
    let mut values = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut values)?;

    let lattice = Lattice {
        s_min,
        s_max,
        n_s,
        ds: (s_max - s_min) / (n_s - 1) as f64,
        q_cap,
        dt,
        n_t,
        snapshot_steps: Vec::new(),
    };
    let params = HjbParams {
        a: coef[0],
        kappa: coef[1],
        gamma: coef[2],
        sigma: coef[3],
        mu: coef[4],
        alpha: coef[5],
        units,
    };
    Ok(SurfaceFile {
        provenance: Provenance { version, config_hash },
        lattice,
        params,
        surface: ValueSurface { tau, q_cap, n_s, values, boundary_mode },
        v_tau_estimate: (!v_tau.is_nan()).then_some(v_tau),
    })
}

pub fn save_surface(path: &std::path::Path, file: &SurfaceFile) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_surface(&mut w, file)?;
    w.flush()?;
    Ok(())
}

pub fn load_surface(path: &std::path::Path) -> Result<SurfaceFile> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_surface(&mut r)
}

/// CSV export with columns `tau,q,s,v`, values in solver units.
pub fn write_surface_csv<W: Write>(
    w: &mut W,
    provenance: &Provenance,
    lattice: &Lattice,
    surfaces: &[ValueSurface],
) -> Result<()> {
    w.write_all(provenance.csv_comment().as_bytes())?;
    writeln!(w, "tau,q,s,v")?;
    for v in surfaces {
        for q in lattice.q_values() {
            for (j, x) in v.row(q).iter().enumerate() {
                writeln!(w, "{},{},{},{}", v.tau, q, lattice.s(j), x)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, terminal_condition, LatticeSpec};
    use crate::model::ScaledParams;

    #[test]
    fn binary_round_trip_preserves_everything() {
        let params = HjbParams::scaled(&ScaledParams {
            a: 2.0,
            kappa: 0.75,
            sigma: 0.8,
            mu: 2.0,
            horizon: 1.0,
        });
        let lat = build_lattice(
            &params,
            &LatticeSpec { n_s: 7, q_cap: 2, horizon: 1.0, dt: 0.25, ..Default::default() },
        )
        .unwrap();
        let mut surface = terminal_condition(&lat, BoundaryMode::ZeroSecondDerivativeInQ);
        surface.tau = 0.75;
        surface.values[3] = -1.0e-300;
        let file = SurfaceFile {
            provenance: Provenance::new("abcdef0123456789"),
            lattice: Lattice { snapshot_steps: Vec::new(), ..lat },
            params,
            surface,
            v_tau_estimate: Some(0.125),
        };
        let mut buf = Vec::new();
        write_surface(&mut buf, &file).unwrap();
        assert_eq!(&buf[..5], b"MMRV1");
        let back = read_surface(&mut buf.as_slice()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn rejects_foreign_files() {
        let bytes = b"NOTMMRV...".to_vec();
        assert!(matches!(read_surface(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
