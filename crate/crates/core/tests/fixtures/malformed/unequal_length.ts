# expect-error line 3
@problemName Bad
@equalLength false
@classLabel true a b
@data
1,2,3:4,5,6:a
7,8,9:1,2,3:b
