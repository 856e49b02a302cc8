/// Splits fuzz input into a JSON part and a binary part. The first two
/// bytes (little endian) give the JSON length.
pub fn split(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let (len, rest) = data.split_first_chunk::<2>()?;
    let n = (u16::from_le_bytes(*len) as usize).min(rest.len());
    Some(rest.split_at(n))
}
