//! Loading encoded functions into executable memory and calling them.

use thiserror::Error;

use crate::emit::AsmProgram;
use crate::encode::{encode_all, EncodeError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("native execution needs an x86-64 host")]
    PlatformUnsupported,
    #[error("CPU lacks {0}")]
    MissingFeature(&'static str),
    #[error("mapping executable memory failed: {0}")]
    Map(std::io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("{0} pointer arguments; at most 6 are supported")]
    Arity(usize),
}

fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as usize
    } else {
        4096
    }
}

/// An anonymous mapping released on drop.
struct Mapping {
    ptr: *mut u8,
    len: usize,
}

impl Mapping {
    fn new(len: usize, prot: libc::c_int) -> Result<Mapping, ExecError> {
        // SAFETY: anonymous private mapping with no address hint.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                prot,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(ExecError::Map(std::io::Error::last_os_error()));
        }
        Ok(Mapping {
            ptr: ptr as *mut u8,
            len,
        })
    }

    fn protect(&self, offset: usize, len: usize, prot: libc::c_int) -> Result<(), ExecError> {
        // SAFETY: the range lies inside this mapping and is page aligned by the callers.
        let rc = unsafe { libc::mprotect(self.ptr.add(offset) as *mut libc::c_void, len, prot) };
        if rc != 0 {
            return Err(ExecError::Map(std::io::Error::last_os_error()));
        }
        Ok(())
    }
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: ptr/len come from a successful mmap.
        unsafe {
            libc::munmap(self.ptr as *mut libc::c_void, self.len);
        }
    }
}

// The mapping is only read (executed) after construction.
unsafe impl Send for Mapping {}
unsafe impl Sync for Mapping {}

/// Machine code copied into a fresh mapping, then made read+execute (never writable
/// and executable at once).
pub struct CodeBuffer {
    map: Mapping,
    code_len: usize,
}

impl CodeBuffer {
    pub fn new(code: &[u8]) -> Result<CodeBuffer, ExecError> {
        let page = page_size();
        let len = code.len().max(1).div_ceil(page) * page;
        let map = Mapping::new(len, libc::PROT_READ | libc::PROT_WRITE)?;
        // SAFETY: the mapping is writable and at least code.len() bytes long.
        unsafe { std::ptr::copy_nonoverlapping(code.as_ptr(), map.ptr, code.len()) };
        map.protect(0, len, libc::PROT_READ | libc::PROT_EXEC)?;
        Ok(CodeBuffer {
            map,
            code_len: code.len(),
        })
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.map.ptr
    }

    pub fn bytes(&self) -> &[u8] {
        // SAFETY: the first code_len bytes were initialized in `new` and stay readable.
        unsafe { std::slice::from_raw_parts(self.map.ptr, self.code_len) }
    }
}

/// Fails unless the host can run code using `features`.
pub fn check_host(features: crate::catalog::Features) -> Result<(), ExecError> {
    if !cfg!(target_arch = "x86_64") {
        return Err(ExecError::PlatformUnsupported);
    }
    let have = crate::catalog::Features::detect();
    if features.bmi2 && !have.bmi2 {
        return Err(ExecError::MissingFeature("BMI2 (mulx, rorx)"));
    }
    if features.adx && !have.adx {
        return Err(ExecError::MissingFeature("ADX (adcx, adox)"));
    }
    Ok(())
}

/// Calls machine code at `p` as `f(out, args...)`.
///
/// # Safety
/// `p` must point to executable code following the System V convention that stays
/// within the bounds of `out` and `args`; at most five input pointers.
#[inline(always)]
pub unsafe fn call_code(p: *const u8, out: *mut u64, args: &[*const u64]) {
    #[cfg(target_arch = "x86_64")]
    {
        type P = *const u64;
        match *args {
            [] => std::mem::transmute::<*const u8, extern "sysv64" fn(*mut u64)>(p)(out),
            [a] => std::mem::transmute::<*const u8, extern "sysv64" fn(*mut u64, P)>(p)(out, a),
            [a, b] => {
                std::mem::transmute::<*const u8, extern "sysv64" fn(*mut u64, P, P)>(p)(out, a, b)
            }
            [a, b, c] => {
                std::mem::transmute::<*const u8, extern "sysv64" fn(*mut u64, P, P, P)>(p)(
                    out, a, b, c,
                )
            }
            [a, b, c, d] => std::mem::transmute::<
                *const u8,
                extern "sysv64" fn(*mut u64, P, P, P, P),
            >(p)(out, a, b, c, d),
            [a, b, c, d, e] => std::mem::transmute::<
                *const u8,
                extern "sysv64" fn(*mut u64, P, P, P, P, P),
            >(p)(out, a, b, c, d, e),
            _ => unreachable!("at most five input pointers"),
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = (p, out, args);
        unreachable!("native code only runs on x86-64")
    }
}

/// One executable region that different functions are copied into in turn, so that
/// all of them run from the same address. Writable and executable never at once.
pub struct StagingArea {
    map: Mapping,
    loaded: usize,
}

impl StagingArea {
    pub fn new(capacity: usize) -> Result<StagingArea, ExecError> {
        if !cfg!(target_arch = "x86_64") {
            return Err(ExecError::PlatformUnsupported);
        }
        let page = page_size();
        let len = capacity.max(1).div_ceil(page) * page;
        let map = Mapping::new(len, libc::PROT_READ | libc::PROT_EXEC)?;
        Ok(StagingArea { map, loaded: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.map.len
    }

    /// Replaces the staged code with `exe`'s, growing the region if needed.
    pub fn load(&mut self, exe: &Executable) -> Result<(), ExecError> {
        let code = exe.code().bytes();
        if code.len() > self.map.len {
            *self = StagingArea::new(code.len())?;
        }
        self.map
            .protect(0, self.map.len, libc::PROT_READ | libc::PROT_WRITE)?;
        // SAFETY: the mapping is writable and large enough.
        unsafe { std::ptr::copy_nonoverlapping(code.as_ptr(), self.map.ptr, code.len()) };
        self.map
            .protect(0, self.map.len, libc::PROT_READ | libc::PROT_EXEC)?;
        self.loaded = code.len();
        Ok(())
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.map.ptr
    }
}

/// A callable function taking `out` followed by one pointer per input array.
pub struct Executable {
    code: CodeBuffer,
    arg_lens: Vec<usize>,
    out_len: usize,
}

impl Executable {
    /// Encodes and loads `program`. The caller checks CPU features with [`check_host`].
    pub fn new(program: &AsmProgram) -> Result<Executable, ExecError> {
        let bytes = encode_all(&program.insts)?;
        // SAFETY: the emitter produces functions following the pointer-argument convention
        // with these array lengths.
        unsafe { Executable::from_bytes(&bytes, program.arg_lens.clone(), program.out_len) }
    }

    /// # Safety
    /// `bytes` must be a System V function `f(out, in0, in1, ...)` that writes at most
    /// `out_len` words to `out` and reads at most `arg_lens[i]` words from input `i`.
    pub unsafe fn from_bytes(
        bytes: &[u8],
        arg_lens: Vec<usize>,
        out_len: usize,
    ) -> Result<Executable, ExecError> {
        if !cfg!(target_arch = "x86_64") {
            return Err(ExecError::PlatformUnsupported);
        }
        if arg_lens.len() + 1 > 6 {
            return Err(ExecError::Arity(arg_lens.len() + 1));
        }
        Ok(Executable {
            code: CodeBuffer::new(bytes)?,
            arg_lens,
            out_len,
        })
    }

    pub fn code(&self) -> &CodeBuffer {
        &self.code
    }

    pub fn arg_lens(&self) -> &[usize] {
        &self.arg_lens
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// Calls the function on raw pointers without any checks.
    ///
    /// # Safety
    /// `out` must be valid for `out_len` writes and `args[i]` for `arg_lens[i]` reads.
    #[inline(always)]
    pub unsafe fn call_raw(&self, out: *mut u64, args: &[*const u64]) {
        call_code(self.code.as_ptr(), out, args)
    }

    /// Calls with slices, checking their lengths.
    pub fn call(&self, out: &mut [u64], args: &[&[u64]]) {
        assert_eq!(out.len(), self.out_len, "output length");
        assert_eq!(args.len(), self.arg_lens.len(), "argument count");
        for (a, &n) in args.iter().zip(&self.arg_lens) {
            assert_eq!(a.len(), n, "argument length");
        }
        let ptrs: Vec<*const u64> = args.iter().map(|a| a.as_ptr()).collect();
        // SAFETY: lengths checked above.
        unsafe { self.call_raw(out.as_mut_ptr(), &ptrs) }
    }

    /// Runs on inputs flattened in argument order, returning the outputs.
    pub fn run(&self, flat: &[u64]) -> Vec<u64> {
        let mut args = Vec::with_capacity(self.arg_lens.len());
        let mut off = 0;
        for &n in &self.arg_lens {
            args.push(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "input count");
        let mut out = vec![0u64; self.out_len];
        self.call(&mut out, &args);
        out
    }
}

/// Word buffer whose last element sits right before an inaccessible page, so reading
/// or writing one word past the end faults.
pub struct GuardedWords {
    map: Mapping,
    offset: usize,
    len: usize,
}

impl GuardedWords {
    pub fn new(len: usize) -> Result<GuardedWords, ExecError> {
        let page = page_size();
        let data_pages = (len.max(1) * 8).div_ceil(page);
        let map = Mapping::new((data_pages + 1) * page, libc::PROT_READ | libc::PROT_WRITE)?;
        map.protect(data_pages * page, page, libc::PROT_NONE)?;
        Ok(GuardedWords {
            offset: data_pages * page - len * 8,
            map,
            len,
        })
    }

    pub fn as_mut_slice(&mut self) -> &mut [u64] {
        // SAFETY: offset..offset+8*len is inside the read/write part and 8-byte aligned.
        unsafe {
            std::slice::from_raw_parts_mut(self.map.ptr.add(self.offset) as *mut u64, self.len)
        }
    }

    pub fn as_slice(&self) -> &[u64] {
        // SAFETY: as above.
        unsafe { std::slice::from_raw_parts(self.map.ptr.add(self.offset) as *const u64, self.len) }
    }
}

impl Executable {
    /// Like [`Executable::run`] but with every array placed against a guard page.
    pub fn run_guarded(&self, flat: &[u64]) -> Result<Vec<u64>, ExecError> {
        let mut bufs = Vec::with_capacity(self.arg_lens.len());
        let mut off = 0;
        for &n in &self.arg_lens {
            let mut g = GuardedWords::new(n)?;
            g.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            bufs.push(g);
        }
        let mut out = GuardedWords::new(self.out_len)?;
        let ptrs: Vec<*const u64> = bufs.iter().map(|b| b.as_slice().as_ptr()).collect();
        // SAFETY: buffers have exactly the declared lengths.
        unsafe { self.call_raw(out.as_mut_slice().as_mut_ptr(), &ptrs) };
        Ok(out.as_slice().to_vec())
    }
}
