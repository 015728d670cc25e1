use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::Image;
use crate::pyramid::Plane;
use crate::Error;

fn from_dynamic(img: DynamicImage) -> Result<Image, Error> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Image::new(w, h, 3, img.into_rgb8().into_raw())
    } else {
        Image::new(w, h, 1, img.into_luma8().into_raw())
    }
}

pub fn load_image_bytes(bytes: &[u8]) -> Result<Image, Error> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    from_dynamic(img)
}

pub fn load_image(path: &Path) -> Result<Image, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    load_image_bytes(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn png_bytes(img: &Image) -> Result<Vec<u8>, Error> {
    let color = if img.channels == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut out),
        &img.data,
        img.width as u32,
        img.height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn save_png(path: &Path, img: &Image) -> Result<(), Error> {
    let bytes = png_bytes(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Binary greyscale PGM.
pub fn write_pgm(path: &Path, p: &Plane<u8>) -> Result<(), Error> {
    let ctx = || format!("writing {}", path.display());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
    write!(f, "P5\n{} {}\n255\n", p.width, p.height).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(&p.data).map_err(|e| Error::io(ctx(), e))?;
    f.flush().map_err(|e| Error::io(ctx(), e))
}
