//! GeoTIFF reading and writing.
//!
//! Bands are stored pixel-interleaved with `BlackIsZero` photometry and
//! unspecified extra samples, the layout GDAL writes by default. The
//! georeference uses `ModelPixelScale` + `ModelTiepoint`, the CRS is written
//! as EPSG geokeys when possible, and nodata goes in `GDAL_NODATA`. The
//! raster kind and the exact CRS string are kept as `GDAL_METADATA` items.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder, TiffValue};
use tiff::tags::{ExtraSamples, Tag};
use tiff::TiffError;

use super::{GeoTransform, RasterGrid, RasterKind, SampleType};
use crate::error::{Error, Result};

const TAG_GDAL_METADATA: u16 = 42112;
const TAG_GEO_ASCII_PARAMS: u16 = 34737;
const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_CITATION: u16 = 1026;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_TYPE: u16 = 3072;
const META_KIND: &str = "SCARSEG_KIND";
const META_CRS: &str = "SCARSEG_CRS";

fn tiff_err(path: &Path, e: TiffError) -> Error {
    match e {
        TiffError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat(format!("{}: {other}", path.display())),
    }
}

fn interleave<T: Copy>(values: &[f32], bands: usize, conv: impl Fn(f32) -> T) -> Vec<T> {
    let n = values.len() / bands;
    let mut out = Vec::with_capacity(values.len());
    for i in 0..n {
        for b in 0..bands {
            out.push(conv(values[b * n + i]));
        }
    }
    out
}

fn geokeys(crs_id: &str) -> Vec<u16> {
    let mut keys: Vec<[u16; 4]> = vec![[KEY_RASTER_TYPE, 0, 1, 1]];
    let epsg = crs_id.strip_prefix("EPSG:").and_then(|c| c.parse::<u16>().ok());
    match epsg {
        Some(4326) | Some(4258) | Some(4269) => {
            keys.push([KEY_MODEL_TYPE, 0, 1, 2]);
            keys.push([KEY_GEOGRAPHIC_TYPE, 0, 1, epsg.unwrap()]);
        }
        Some(code) => {
            keys.push([KEY_MODEL_TYPE, 0, 1, 1]);
            keys.push([KEY_PROJECTED_TYPE, 0, 1, code]);
        }
        None => {}
    }
    keys.push([KEY_CITATION, TAG_GEO_ASCII_PARAMS, crs_id.len() as u16 + 1, 0]);
    keys.sort_by_key(|k| k[0]);
    let mut out = vec![1, 1, 0, keys.len() as u16];
    out.extend(keys.into_iter().flatten());
    out
}

fn metadata_xml(kind: RasterKind, crs_id: &str) -> String {
    format!(
        "<GDALMetadata>\n  <Item name=\"{META_KIND}\">{}</Item>\n  <Item name=\"{META_CRS}\">{}</Item>\n</GDALMetadata>",
        kind.as_str(),
        xml_escape(crs_id)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

fn metadata_item(xml: &str, name: &str) -> Option<String> {
    let open = format!("<Item name=\"{name}\">");
    let start = xml.find(&open)? + open.len();
    let end = xml[start..].find("</Item>")? + start;
    Some(xml_unescape(&xml[start..end]))
}

/// Writes `raster` as a GeoTIFF.
pub fn write_raster(raster: &RasterGrid, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h, bands) = (raster.width() as u32, raster.height() as u32, raster.bands());
    let values = raster.values();
    match raster.sample_type() {
        SampleType::U8 => {
            let data = interleave(values, bands, |v| v as u8);
            write_image::<colortype::Gray8, _>(&mut enc, raster, w, h, &data)
        }
        SampleType::U16 => {
            let data = interleave(values, bands, |v| v as u16);
            write_image::<colortype::Gray16, _>(&mut enc, raster, w, h, &data)
        }
        SampleType::F32 => {
            let data = interleave(values, bands, |v| v);
            write_image::<colortype::Gray32Float, _>(&mut enc, raster, w, h, &data)
        }
    }
    .map_err(|e| tiff_err(path, e))
}

fn write_image<C, W>(
    enc: &mut TiffEncoder<W>,
    raster: &RasterGrid,
    w: u32,
    h: u32,
    data: &[C::Inner],
) -> std::result::Result<(), TiffError>
where
    C: colortype::ColorType,
    [C::Inner]: TiffValue,
    W: std::io::Write + std::io::Seek,
{
    let mut img = enc.new_image::<C>(w, h)?;
    if raster.bands() > 1 {
        img.extra_samples(&vec![ExtraSamples::Unspecified; raster.bands() - 1])?;
    }
    let t = raster.transform();
    let dir = img.encoder();
    dir.write_tag(Tag::ModelPixelScaleTag, &[t.pixel_size_x, t.pixel_size_y, 0.0][..])?;
    dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..])?;
    dir.write_tag(Tag::GeoKeyDirectoryTag, &geokeys(&t.crs_id)[..])?;
    dir.write_tag(Tag::Unknown(TAG_GEO_ASCII_PARAMS), format!("{}|", t.crs_id).as_str())?;
    if let Some(nd) = raster.nodata() {
        dir.write_tag(Tag::GdalNodata, format!("{nd}").as_str())?;
    }
    dir.write_tag(
        Tag::Unknown(TAG_GDAL_METADATA),
        metadata_xml(raster.kind(), &t.crs_id).as_str(),
    )?;
    img.write_data(data)
}

fn deinterleave<T: Copy>(data: &[T], bands: usize, conv: impl Fn(T) -> f32) -> Vec<f32> {
    let n = data.len() / bands;
    let mut out = vec![0f32; data.len()];
    for i in 0..n {
        for b in 0..bands {
            out[b * n + i] = conv(data[i * bands + b]);
        }
    }
    out
}

/// Reads a GeoTIFF written by [`write_raster`] or by GDAL (north-up,
/// uint8/uint16/float32 samples).
pub fn read_raster(path: &Path) -> Result<RasterGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let unsupported = |msg: &str| Error::UnsupportedFormat(format!("{}: {msg}", path.display()));

    let transform = read_transform(&mut dec).map_err(|msg| unsupported(&msg))?;
    let metadata = dec
        .find_tag(Tag::Unknown(TAG_GDAL_METADATA))
        .ok()
        .flatten()
        .and_then(|v| v.into_string().ok())
        .unwrap_or_default();
    let crs_id = metadata_item(&metadata, META_CRS)
        .or_else(|| epsg_from_geokeys(&mut dec))
        .ok_or_else(|| unsupported("no CRS information"))?;
    let kind = match metadata_item(&metadata, META_KIND) {
        Some(k) => RasterKind::parse(&k).ok_or_else(|| unsupported("unknown raster kind"))?,
        None => RasterKind::Image,
    };
    let nodata = match dec.find_tag(Tag::GdalNodata) {
        Ok(Some(v)) => {
            let s = v.into_string().map_err(|e| tiff_err(path, e))?;
            Some(
                s.trim_matches(char::from(0))
                    .trim()
                    .parse::<f32>()
                    .map_err(|_| unsupported("unparsable GDAL_NODATA"))?,
            )
        }
        _ => None,
    };

    let pixels = (w as usize) * (h as usize);
    let image = dec.read_image().map_err(|e| tiff_err(path, e))?;
    let (values, sample_type) = match image {
        DecodingResult::U8(d) => {
            let bands = d.len() / pixels;
            (deinterleave(&d, bands, f32::from), SampleType::U8)
        }
        DecodingResult::U16(d) => {
            let bands = d.len() / pixels;
            (deinterleave(&d, bands, f32::from), SampleType::U16)
        }
        DecodingResult::F32(d) => {
            let bands = d.len() / pixels;
            (deinterleave(&d, bands, |v| v), SampleType::F32)
        }
        _ => return Err(unsupported("sample type must be uint8, uint16 or float32")),
    };
    let bands = values.len() / pixels;
    let transform = GeoTransform { crs_id, ..transform };
    RasterGrid::from_parts(
        w as usize,
        h as usize,
        bands,
        values,
        transform,
        kind,
        sample_type,
        nodata,
    )
}

fn read_transform<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> std::result::Result<GeoTransform, String> {
    let scale = dec.find_tag(Tag::ModelPixelScaleTag).ok().flatten();
    let tie = dec.find_tag(Tag::ModelTiepointTag).ok().flatten();
    if let (Some(scale), Some(tie)) = (scale, tie) {
        let scale = scale.into_f64_vec().map_err(|e| e.to_string())?;
        let tie = tie.into_f64_vec().map_err(|e| e.to_string())?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err("malformed georeference tags".into());
        }
        return Ok(GeoTransform {
            origin_x: tie[3] - tie[0] * scale[0],
            origin_y: tie[4] + tie[1] * scale[1],
            pixel_size_x: scale[0],
            pixel_size_y: scale[1],
            crs_id: String::new(),
        });
    }
    if let Some(m) = dec.find_tag(Tag::ModelTransformationTag).ok().flatten() {
        let m = m.into_f64_vec().map_err(|e| e.to_string())?;
        if m.len() < 8 || m[1] != 0.0 || m[4] != 0.0 || m[5] >= 0.0 {
            return Err("only north-up model transformations are supported".into());
        }
        return Ok(GeoTransform {
            origin_x: m[3],
            origin_y: m[7],
            pixel_size_x: m[0],
            pixel_size_y: -m[5],
            crs_id: String::new(),
        });
    }
    Err("missing georeference".into())
}

fn epsg_from_geokeys<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> Option<String> {
    let keys = dec.get_tag_u16_vec(Tag::GeoKeyDirectoryTag).ok()?;
    keys.get(4..)?
        .chunks_exact(4)
        .find(|k| (k[0] == KEY_PROJECTED_TYPE || k[0] == KEY_GEOGRAPHIC_TYPE) && k[1] == 0)
        .map(|k| format!("EPSG:{}", k[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geokeys_layout() {
        let k = geokeys("EPSG:2100");
        assert_eq!(&k[..4], &[1, 1, 0, 4]);
        assert!(k.chunks_exact(4).any(|c| c == [KEY_PROJECTED_TYPE, 0, 1, 2100]));
    }

    #[test]
    fn metadata_items_parse() {
        let xml = metadata_xml(RasterKind::BinaryMask, "LOCAL:<a&b>");
        assert_eq!(metadata_item(&xml, META_KIND).as_deref(), Some("BINARY_MASK"));
        assert_eq!(metadata_item(&xml, META_CRS).as_deref(), Some("LOCAL:<a&b>"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_raster(Path::new("/nonexistent/x.tif")).unwrap_err();
        assert_eq!(err.category(), "IO_ERROR");
    }

    #[test]
    fn garbage_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tif");
        std::fs::write(&p, b"definitely not a tiff").unwrap();
        assert_eq!(read_raster(&p).unwrap_err().category(), "UNSUPPORTED_FORMAT");
    }
}
