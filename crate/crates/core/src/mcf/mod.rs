//! Mobile-code format: classfiles, bundles, the assembler and the VM.

pub mod asm;
pub mod bundle;
pub mod classfile;
pub mod code;
pub mod descriptor;
pub mod vm;

pub use asm::{assemble, assemble_bundle, AsmError};
pub use bundle::{Bundle, BundleEntry, BundleError};
pub use classfile::{
    parse_classfile, serialize_classfile, ClassFile, ClassFileError, ConstantPoolEntry, CpIndex, FieldDef, MethodDef,
};
pub use vm::{ClassOrigin, LoadedClass, NativeCall, NativeFault, NativeKey, ObjRef, Vm, VmError, VmValue};
