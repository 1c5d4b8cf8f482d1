//! Binary scene container.
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! "U4DS" | version | flags | N | sh_degree | K | D_e | sky_w | sky_h
//!        | n_dyn | n_static | n_ground | n_sky
//! mu[N*3] rot[N*4] scale[N*3] opacity[N] color[N*3*(deg+1)^2] logits[N*K]
//! embed_mask[N] (u8) embed[N*D_e]
//! dyn_idx[n_dyn] static_idx[n_static] ground_idx[n_ground] sky_idx[n_sky]
//! sky[sky_h*sky_w*3]
//! K × (name_len: u16, name: utf-8, flags: u8 = dyn | ground<<1 | sky<<2)
//! n_arrays × (name_len: u16, name, ndim, dims[ndim], data[prod(dims)])
//! ```
//!
//! The trailing named arrays carry the deformation net, optimizer state and
//! any other checkpoint payload.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::math::sh_coeff_count;
use crate::semantics::{ClassEntry, ClassTable};
use crate::types::{Gaussian, Scene, SkyTexture};

pub const MAGIC: &[u8; 4] = b"U4DS";
pub const VERSION: u32 = 1;

/// A flat `f64` array with a shape, stored by name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let a = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(a.shape.iter().product::<usize>(), a.data.len(), "{}", a.name);
        a
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![1], vec![value])
    }
}

pub fn find_array<'a>(arrays: &'a [NamedArray], name: &str) -> Option<&'a NamedArray> {
    arrays.iter().find(|a| a.name == name)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("count exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name too long"));
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file ends at offset {}",
                self.pos,
                self.buf.len()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn f64s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("array too large")?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u16(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("invalid utf-8 in {what} at offset {at}"))
    }
}

/// Serializes a scene and trailing named arrays.
pub fn encode(scene: &Scene, arrays: &[NamedArray]) -> Vec<u8> {
    let mut w = Writer::default();
    let n = scene.gaussians.len();
    let k = scene.class_table.len();
    let de = scene.time_embed_dim;
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(0);
    for v in [
        n,
        scene.sh_degree,
        k,
        de,
        scene.sky.width,
        scene.sky.height,
        scene.dyn_idx.len(),
        scene.static_idx.len(),
        scene.ground_idx.len(),
        scene.sky_idx.len(),
    ] {
        w.u32(v);
    }
    for g in &scene.gaussians {
        w.f64s(g.mu.iter());
    }
    for g in &scene.gaussians {
        w.f64s(g.rot.iter());
    }
    for g in &scene.gaussians {
        w.f64s(g.scale.iter());
    }
    for g in &scene.gaussians {
        w.f64(g.opacity);
    }
    for g in &scene.gaussians {
        w.f64s(g.color.iter());
    }
    for g in &scene.gaussians {
        w.f64s(g.sem_logits.iter());
    }
    for g in &scene.gaussians {
        w.u8(u8::from(g.time_embed.is_some()));
    }
    let zeros = vec![0.0; de];
    for g in &scene.gaussians {
        w.f64s(g.time_embed.as_deref().unwrap_or(&zeros).iter());
    }
    for set in [&scene.dyn_idx, &scene.static_idx, &scene.ground_idx, &scene.sky_idx] {
        for &i in set.iter() {
            w.u32(i);
        }
    }
    w.f64s(scene.sky.texels.iter());
    for c in &scene.class_table.classes {
        w.str(&c.name);
        w.u8(u8::from(c.is_dynamic) | u8::from(c.is_ground) << 1 | u8::from(c.is_sky) << 2);
    }
    w.u32(arrays.len());
    for a in arrays {
        w.str(&a.name);
        w.u32(a.shape.len());
        for &d in &a.shape {
            w.u32(d);
        }
        w.f64s(a.data.iter());
    }
    w.buf
}

/// Parses a container. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Scene, Vec<NamedArray>)> {
    decode_inner(bytes).map_err(|m| Error::format(path, m))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<(Scene, Vec<NamedArray>), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic at offset 0 (expected U4DS)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(format!("unsupported container version {version}"));
    }
    let _flags = r.u32("flags")?;
    let n = r.u32("gaussian count")?;
    let sh_degree = r.u32("sh degree")?;
    if sh_degree > 1 {
        return Err(format!("unsupported sh degree {sh_degree}"));
    }
    let k = r.u32("class count")?;
    let de = r.u32("embedding dim")?;
    let sky_w = r.u32("sky width")?;
    let sky_h = r.u32("sky height")?;
    let counts = [
        r.u32("dyn count")?,
        r.u32("static count")?,
        r.u32("ground count")?,
        r.u32("sky count")?,
    ];
    let nc = 3 * sh_coeff_count(sh_degree);

    let mu = r.f64s(n * 3, "mu")?;
    let rot = r.f64s(n * 4, "rot")?;
    let scale = r.f64s(n * 3, "scale")?;
    let opacity = r.f64s(n, "opacity")?;
    let color = r.f64s(n * nc, "color")?;
    let logits = r.f64s(n * k, "semantic logits")?;
    let mask = r.take(n, "embedding mask")?.to_vec();
    let embed = r.f64s(n * de, "time embeddings")?;
    let mut sets: [Vec<usize>; 4] = Default::default();
    for (set, &c) in sets.iter_mut().zip(&counts) {
        for _ in 0..c {
            let i = r.u32("partition index")?;
            if i >= n {
                return Err(format!("partition index {i} out of range at offset {}", r.pos - 4));
            }
            set.push(i);
        }
    }
    let texels = r.f64s(sky_w * sky_h * 3, "sky texture")?;
    let mut classes = Vec::with_capacity(k);
    for id in 0..k {
        let name = r.str("class name")?;
        let f = r.u8("class flags")?;
        classes.push(ClassEntry {
            id,
            name,
            is_dynamic: f & 1 != 0,
            is_ground: f & 2 != 0,
            is_sky: f & 4 != 0,
        });
    }
    let n_arrays = r.u32("array count")?;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name = r.str("array name")?;
        let ndim = r.u32("array rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("array dim")?);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len, &name)?;
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos));
    }

    let gaussians = (0..n)
        .map(|i| Gaussian {
            mu: Vector3::new(mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]),
            rot: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
            scale: Vector3::new(scale[3 * i], scale[3 * i + 1], scale[3 * i + 2]),
            opacity: opacity[i],
            color: color[nc * i..nc * (i + 1)].to_vec(),
            sem_logits: logits[k * i..k * (i + 1)].to_vec(),
            time_embed: (mask[i] != 0).then(|| embed[de * i..de * (i + 1)].to_vec()),
        })
        .collect();
    let [dyn_idx, static_idx, ground_idx, sky_idx] = sets;
    Ok((
        Scene {
            gaussians,
            dyn_idx,
            static_idx,
            ground_idx,
            sky_idx,
            sky: SkyTexture {
                width: sky_w,
                height: sky_h,
                texels,
            },
            class_table: ClassTable { classes },
            sh_degree,
            time_embed_dim: de,
        },
        arrays,
    ))
}

pub fn write_file(path: &Path, scene: &Scene, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode(scene, arrays)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<(Scene, Vec<NamedArray>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
