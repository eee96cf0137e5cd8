//! NPY persistence for tensors (little-endian `f64`, C order).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn file_error(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_npy(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| file_error(path, e))?;
    let shape: Vec<u64> = tensor.shape().iter().map(|&d| d as u64).collect();
    let mut writer = npyz::WriteOptions::<f64>::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| file_error(path, e))?;
    writer
        .extend(tensor.data().iter().copied())
        .map_err(|e| file_error(path, e))?;
    writer.finish().map_err(|e| file_error(path, e))?;
    Ok(())
}

pub fn read_npy(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| file_error(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| file_error(path, e))?;
    if npy.order() != npyz::Order::C {
        return Err(Error::invalid(format!(
            "{}: only C-ordered arrays are supported",
            path.display()
        )));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data: Vec<f64> = match npy.dtype() {
        npyz::DType::Plain(ts) if ts.type_char() == npyz::TypeChar::Float && ts.size_field() == 4 => npy
            .into_vec::<f32>()
            .map_err(|e| file_error(path, e))?
            .into_iter()
            .map(f64::from)
            .collect(),
        _ => npy.into_vec::<f64>().map_err(|e| file_error(path, e))?,
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 3.0, f64::MAX, 0.0]).unwrap();
        write_npy(&path, &t).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_standard_npy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        write_npy(&path, &Tensor::zeros(&[4])).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        let header = String::from_utf8_lossy(&bytes[10..]);
        assert!(header.contains("'descr': '<f8'"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_npy(Path::new("/nonexistent/x.npy")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.npy"));
    }
}
