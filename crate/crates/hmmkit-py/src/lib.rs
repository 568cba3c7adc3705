use pyo3::prelude::*;

#[pymodule]
fn hmmkit_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
