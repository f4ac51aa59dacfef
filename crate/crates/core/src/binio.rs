//! Little-endian cursor for the binary bag and checkpoint formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::parse(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], version: u8) -> Result<()> {
        let got = self.array::<4>("magic")?;
        if &got != expected {
            return Err(Error::parse(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(expected).unwrap())));
        }
        let at = self.pos;
        let v = self.u8("version")?;
        if v != version {
            return Err(Error::parse(at, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_and_reports_offsets() {
        let mut out = b"SSMB\x01".to_vec();
        put_u16(&mut out, 513);
        put_f64(&mut out, -0.25);
        let mut r = Reader::new(&out);
        r.magic(b"SSMB", 1).unwrap();
        assert_eq!(r.u16("h").unwrap(), 513);
        assert_eq!(r.f64("x").unwrap(), -0.25);
        assert!(r.at_end());
        match r.u32("tail") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 15),
            other => panic!("{other:?}"),
        }
        let mut r = Reader::new(b"SSMB\x02");
        assert!(matches!(r.magic(b"SSMB", 1), Err(Error::Parse { offset: 4, .. })));
    }
}
