//! Run bytecode in the VM with one native binding.

use std::rc::Rc;

use remote_playground::mcf::{assemble_bundle, NativeKey, Vm, VmValue};

const SRC: &str = r#"
.class Counter
.method native report (I)V
.method run (I)I 3 3
    ICONST 0
    STORE 2
L0:
    LOAD 1
    IFEQ L1
    LOAD 2
    LOAD 1
    IADD
    STORE 2
    LOAD 1
    ICONST 1
    ISUB
    STORE 1
    GOTO L0
L1:
    LOAD 0
    LOAD 2
    INVOKE Counter.report (I)V
    LOAD 2
    ICONST 0
    IDIV
    RETV
"#;

fn main() {
    let mut vm: Vm<Vec<i32>> = Vm::new();
    vm.add_page_bundle(&assemble_bundle(SRC).unwrap());
    vm.bind_native(
        NativeKey::new("Counter", "report", "(I)V"),
        Rc::new(|_vm, seen: &mut Vec<i32>, call| {
            if let Some(v) = call.args[0].as_i32() {
                seen.push(v);
            }
            Ok(VmValue::Null)
        }),
    );
    let mut seen = Vec::new();
    let obj = vm.instantiate("Counter").unwrap();
    let r = vm.run_method(&mut seen, obj, "run", "(I)I", vec![VmValue::I32(10)]);
    println!("native saw {seen:?}");
    println!("result: {r:?}");
}
