//! Coefficient coding in decode order.
//!
//! Bands are visited coarse to fine; each band in raster order. Before the
//! level-`k` details, the decoder rebuilds `LL_k` from what it has already
//! decoded, so both sides see the same contexts.

use crate::entropy::{context_window, escape_code, escape_value, symbol_table, ContextClass, SymbolTable};
use crate::model::Model;
use crate::pyramid::{band_level, Plane, QuantizedPyramid};
use crate::rangecoder::{Decoder, Encoder};
use crate::Error;

struct Walker<'m> {
    model: &'m Model,
    scratch: Vec<f64>,
}

impl Walker<'_> {
    fn table(
        &mut self,
        levels: usize,
        band: usize,
        plane: &Plane<i32>,
        x: usize,
        y: usize,
        reference: Option<&Plane<f64>>,
    ) -> Result<SymbolTable, Error> {
        let class = ContextClass::of_band(levels, band);
        let ctx = self.model.context();
        let w = context_window(plane, x, y, reference, ctx.size());
        let m = ctx.predict(&self.model.store, class, &w, band_level(levels, band), levels, &mut self.scratch);
        symbol_table(&m)
    }

    /// Rebuilds the reference planes band by band; `decoded` must hold every
    /// band up to and including `band - 1`.
    fn reference(
        &self,
        p: &QuantizedPyramid,
        band: usize,
        current: &mut Option<Plane<f64>>,
    ) -> Result<(), Error> {
        let k = p.levels;
        if band == 1 {
            *current = Some(p.bands[0].map(|v| v as f64));
        } else if band > 1 && (band - 1) % 3 == 0 {
            let ll = current.take().ok_or_else(|| Error::Sequencing("approximation not rebuilt".into()))?;
            let d = [&p.bands[band - 3], &p.bands[band - 2], &p.bands[band - 1]].map(|b| b.map(|v| v as f64));
            debug_assert!(band_level(k, band) + 1 == band_level(k, band - 1));
            *current = Some(self.model.next_reference(&ll, [&d[0], &d[1], &d[2]])?);
        }
        Ok(())
    }
}

pub fn encode_pyramid(model: &Model, enc: &mut Encoder, p: &QuantizedPyramid) -> Result<(), Error> {
    p.validate()?;
    let mut w = Walker { model, scratch: Vec::new() };
    let mut reference = None;
    for b in 0..p.bands.len() {
        w.reference(p, b, &mut reference)?;
        let plane = &p.bands[b];
        let r = if b == 0 { None } else { reference.as_ref() };
        for y in 0..plane.height {
            for x in 0..plane.width {
                let t = w.table(p.levels, b, plane, x, y, r)?;
                let v = plane.get(x, y);
                let s = t.symbol(v);
                enc.encode(s, &t.cdf);
                if s == t.escape() {
                    enc.encode_raw16(escape_code(v));
                }
            }
        }
    }
    Ok(())
}

pub fn decode_pyramid(
    model: &Model,
    dec: &mut Decoder<'_>,
    width: usize,
    height: usize,
) -> Result<QuantizedPyramid, Error> {
    let mut p = QuantizedPyramid::zeros(width, height, model.levels())?;
    let mut w = Walker { model, scratch: Vec::new() };
    let mut reference = None;
    for b in 0..p.bands.len() {
        w.reference(&p, b, &mut reference)?;
        let (bw, bh) = (p.bands[b].width, p.bands[b].height);
        for y in 0..bh {
            for x in 0..bw {
                let r = if b == 0 { None } else { reference.as_ref() };
                let t = w.table(p.levels, b, &p.bands[b], x, y, r)?;
                let s = dec.decode(&t.cdf)?;
                let v = if s == t.escape() { escape_value(dec.decode_raw16()?) } else { t.low + s as i32 };
                p.bands[b].set(x, y, v);
            }
        }
    }
    Ok(p)
}
